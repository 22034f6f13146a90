import math

assert math.isclose(math.sqrt(2) ** 2, 2.0)
