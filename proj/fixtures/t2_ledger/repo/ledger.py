def balance(entries):
    total = 0
    for e in entries:
        total += abs(e)
    return total
