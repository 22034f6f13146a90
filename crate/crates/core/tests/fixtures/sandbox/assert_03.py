def is_even(n):
    return n % 2 == 1

assert is_even(4)
