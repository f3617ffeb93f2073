"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES = []


def record(name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    LINES.append(line)
    print(line)
    return ok
