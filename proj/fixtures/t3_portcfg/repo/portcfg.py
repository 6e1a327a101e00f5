def parse_port(s):
    if not s.isdigit():
        return None
    return int(s)
