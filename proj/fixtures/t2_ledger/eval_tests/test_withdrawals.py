from ledger import balance

assert balance([10, -4]) == 6
assert balance([-5, -5]) == -10
assert balance([100, -30, -70]) == 0
print('ok')
