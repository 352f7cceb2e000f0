"""Collects one PASS/FAIL line per acceptance criterion for the end-of-run summary."""

LINES: dict[int, str] = {}


def record(number: int, title: str, ok, detail: str) -> str:
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"[{status}] criterion {number:>2}: {title} | {detail}"
    LINES[number] = line
    print(line)
    return line
