"""CSV and SVG emission for the report-producing commands.

Every CSV starts with a single ``# stem <command> <timestamp>`` comment line; the body below it
depends only on the command's inputs.
"""
import csv
import io
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from core.errors import InternalError, TensorIOError
from core.log import get_logger

logger = get_logger(__name__)


def _cell(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if not math.isfinite(value):
            raise InternalError(f"non-finite value {value!r} in report row")
        return repr(value)
    return value


def render_csv(command: str, fieldnames: Sequence[str], rows: Iterable[Dict], timestamp: Optional[str] = None) -> str:
    stamp = timestamp or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    buf = io.StringIO()
    buf.write(f"# stem {command} {stamp}\n")
    w = csv.DictWriter(buf, fieldnames=list(fieldnames), extrasaction="raise", lineterminator="\n")
    w.writeheader()
    for row in rows:
        missing = [k for k in fieldnames if k not in row]
        if missing:
            raise InternalError(f"{command} row is missing columns {missing}")
        w.writerow({k: _cell(row[k]) for k in fieldnames})
    return buf.getvalue()


def csv_body(text: str) -> str:
    """The CSV without its leading comment line."""
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


def read_csv(text: str) -> List[Dict[str, str]]:
    return list(csv.DictReader(io.StringIO(csv_body(text))))


def write_text(path: str, text: str):
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise TensorIOError(f"cannot write '{target}': {e.strerror or e}") from e
    logger.info("wrote %s", target)


def emit_csv(command: str, fieldnames: Sequence[str], rows: List[Dict], path: Optional[str]) -> str:
    """Writes to ``path`` when given and returns the text either way."""
    text = render_csv(command, fieldnames, rows)
    if path:
        write_text(path, text)
    return text


def write_line_chart(
    path: str,
    x: Sequence[float],
    left: Sequence[float],
    right: Sequence[float],
    xlabel: str,
    left_label: str = "mean mse",
    right_label: str = "mean budget fraction",
):
    """Two-axis line chart as a standalone SVG; identical inputs give identical bytes."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams.update({"svg.hashsalt": "stem", "font.family": "DejaVu Sans", "axes.unicode_minus": False})
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.0), constrained_layout=True)
    ax.plot(list(x), list(left), marker="o", color="tab:blue", label=left_label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(left_label, color="tab:blue")
    ax.grid(True, alpha=0.3)
    twin = ax.twinx()
    twin.plot(list(x), list(right), marker="s", linestyle="--", color="tab:orange", label=right_label)
    twin.set_ylabel(right_label, color="tab:orange")

    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(target, format="svg", metadata={"Date": None})
    except OSError as e:
        raise TensorIOError(f"cannot write '{target}': {e.strerror or e}") from e
    finally:
        plt.close(fig)
    logger.info("wrote %s", target)
