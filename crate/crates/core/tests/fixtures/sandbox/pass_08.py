try:
    1 / 0
except ZeroDivisionError:
    pass
assert 1 + 1 == 2
