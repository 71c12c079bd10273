"""Collects one PASS/FAIL/SKIP line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def record(criterion: int, status: str, detail: str) -> str:
    line = f"criterion {criterion:>2}: {status:<4}  {detail}"
    LINES.append(line)
    print(line, flush=True)
    return line
