"""Per-criterion outcomes collected by the acceptance tests and printed at session end."""

RESULTS = {}


def record(n, name, ok, detail):
    RESULTS[n] = (bool(ok), name, detail)
    print(f"criterion {n} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return bool(ok)
