from units import to_celsius

assert to_celsius(212) == 100
print('ok')
