"""
Metrics report: structured JSON plus plain-text tables.

Runtimes are kept out of report.json / report.txt and written to a
separate runtime.json, so reports from identical runs compare equal byte
for byte.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union


logger = logging.getLogger(__name__)


REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"
RUNTIME_JSON = "runtime.json"

_COLUMN = 10


@dataclass
class MetricsReport:
    """Evaluation results of one pipeline run; missing sections are None."""

    config_fingerprint: str
    recall: Optional[dict[str, float]] = None
    ner: Optional[dict] = None
    track1: Optional[dict] = None
    track2: Optional[dict] = None
    runtimes: dict[str, float] = field(default_factory=dict)

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        """Sections of ``other`` fill the gaps of this report."""
        runtimes = dict(self.runtimes)
        for stage, seconds in other.runtimes.items():
            runtimes[stage] = runtimes.get(stage, 0.0) + seconds
        return MetricsReport(
            config_fingerprint=self.config_fingerprint,
            recall=self.recall if self.recall is not None else other.recall,
            ner=self.ner if self.ner is not None else other.ner,
            track1=self.track1 if self.track1 is not None else other.track1,
            track2=self.track2 if self.track2 is not None else other.track2,
            runtimes=runtimes,
        )

    def to_dict(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "retrieval_recall": self.recall,
            "ner": self.ner,
            "track1": self.track1,
            "track2": self.track2,
        }


def _row(label: str, values: list[str]) -> str:
    return f"{label:<24}" + "".join(f"{v:>{_COLUMN}}" for v in values)


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def render_text(report: MetricsReport) -> str:
    """Plain-text tables for retrieval recall, recognition and linking."""
    lines = [f"Configuration fingerprint: {report.config_fingerprint}", ""]

    if report.recall is not None:
        lines.append("Candidate retrieval")
        lines.append(_row("Method", list(report.recall)))
        lines.append(_row("bi-encoder", [_fmt(v) for v in report.recall.values()]))
        lines.append("")

    if report.ner is not None:
        lines.append("Entity recognition")
        lines.append(_row("Method", ["P", "R", "F1"]))
        label = f"tagger x{report.ner.get('models', 1)}"
        lines.append(_row(label, [_fmt(report.ner[k]) for k in ("precision", "recall", "f1")]))
        lines.append("")

    if report.track1 is not None or report.track2 is not None:
        lines.append("Entity linking")
        lines.append(_row("Track", ["P", "R", "F1", "Accuracy"]))
        if report.track1 is not None:
            t1 = report.track1
            lines.append(_row("track1", [_fmt(t1["precision"]), _fmt(t1["recall"]), _fmt(t1["f1"]), "-"]))
        if report.track2 is not None:
            lines.append(_row("track2", ["-", "-", "-", _fmt(report.track2["accuracy"])]))
        lines.append("")

    return "\n".join(lines)


def write_report(report: MetricsReport, output_dir: Union[str, Path]) -> dict[str, Path]:
    """
    Write report.json, report.txt and runtime.json into ``output_dir``.

    Returns:
        Mapping of artifact name to written path.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": output_dir / REPORT_JSON,
        "text": output_dir / REPORT_TEXT,
        "runtime": output_dir / RUNTIME_JSON,
    }

    with open(paths["json"], "w", encoding="utf-8", newline="\n") as f:
        json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")
    with open(paths["text"], "w", encoding="utf-8", newline="\n") as f:
        f.write(render_text(report))
    with open(paths["runtime"], "w", encoding="utf-8", newline="\n") as f:
        json.dump({k: round(v, 3) for k, v in report.runtimes.items()}, f, indent=2)
        f.write("\n")

    logger.info(f"Wrote report to {paths['json']} and {paths['text']}")
    return paths
