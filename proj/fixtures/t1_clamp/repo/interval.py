def clamp(value, lo, hi):
    if value > hi:
        return hi - 1
    if value < lo:
        return lo
    return value
