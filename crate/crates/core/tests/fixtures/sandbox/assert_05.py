def g():
    return None

assert g() is not None
