from units import to_celsius


def freezing(f):
    return to_celsius(f) < 0
