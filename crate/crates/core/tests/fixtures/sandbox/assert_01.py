def f(x):
    return x + 1

assert f(1) == 3
