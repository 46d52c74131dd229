"""Collects one pass/fail line per acceptance criterion for the end-of-run summary."""

LINES: list[str] = []


def report(number, title, ok, detail=""):
    """``ok=None`` marks a criterion that could not run here."""
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    line = f"criterion {number:>2} {status}  {title}" + (f"  [{detail}]" if detail else "")
    LINES.append(line)
    print(line)
    return ok
