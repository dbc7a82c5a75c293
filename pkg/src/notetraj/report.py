"""Metric reports: per-fold records, aggregation, and table/plot output."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .metrics import Interval, confidence_interval

METRICS = ("MAR", "MAP")


@dataclass(frozen=True)
class MetricRecord:
    model: str
    fold: int
    k: int
    map: float
    mar: float


@dataclass
class MetricReport:
    records: list[MetricRecord] = field(default_factory=list)
    level: float = 0.95

    def add(self, model: str, fold: int, k: int, map_value: float, mar_value: float) -> None:
        self.records.append(MetricRecord(model, fold, k, map_value, mar_value))

    @property
    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.records))

    @property
    def ks(self) -> list[int]:
        return sorted({r.k for r in self.records})

    def values(self, model: str, k: int, metric: str) -> list[float]:
        attr = metric.lower()
        rows = sorted((r for r in self.records if r.model == model and r.k == k), key=lambda r: r.fold)
        return [getattr(r, attr) for r in rows]

    def aggregate(self, model: str, k: int, metric: str) -> Interval:
        vals = self.values(model, k, metric)
        if len(vals) == 1:
            return Interval(vals[0], vals[0], vals[0], 0.0)
        return confidence_interval(vals, self.level)

    def to_dict(self) -> dict:
        return {"level": self.level, "records": [asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls([MetricRecord(**r) for r in d["records"]], d.get("level", 0.95))


def format_mean_std(mean: float, std: float, decimals: int = 3) -> str:
    """``0.425, 0.005 -> "0.425(5)"``: std expressed in units of the last shown decimal."""
    return f"{mean:.{decimals}f}({int(round(std * 10 ** decimals))})"


def _columns(ks: list[int]) -> list[tuple[str, int]]:
    return [(metric, k) for k in ks for metric in METRICS]


def write_table_csv(report: MetricReport, path: Path) -> None:
    cols = _columns(report.ks)
    header = ["model"] + [f"{m}@{k}" for m, k in cols]
    for m, k in cols:
        header += [f"{m}@{k}_{part}" for part in ("mean", "std", "ci_low", "ci_high")]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for model in report.models:
            aggs = [report.aggregate(model, k, m) for m, k in cols]
            row = [model] + [format_mean_std(a.mean, a.std) for a in aggs]
            for a in aggs:
                row += [repr(a.mean), repr(a.std), repr(a.low), repr(a.high)]
            w.writerow(row)


def read_table_csv(path: str | Path) -> dict[str, dict[tuple[str, int], Interval]]:
    """Parse ``table5.csv`` back into {model: {(metric, K): Interval}}."""
    out: dict[str, dict[tuple[str, int], Interval]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cells = {}
            for key in row:
                if key.endswith("_mean"):
                    name = key[: -len("_mean")]
                    metric, k = name.split("@")
                    cells[(metric, int(k))] = Interval(
                        float(row[f"{name}_ci_low"]),
                        float(row[f"{name}_ci_high"]),
                        float(row[f"{name}_mean"]),
                        float(row[f"{name}_std"]),
                    )
            out[row["model"]] = cells
    return out


def render_table(report: MetricReport) -> str:
    cols = _columns(report.ks)
    width = max([len(m) for m in report.models] + [5]) + 2
    top = " " * width + "".join(f"{'K = ' + str(k):<24}" for k in report.ks)
    head = f"{'Model':<{width}}" + "".join(f"{m:<12}" for m, _ in cols)
    lines = [top.rstrip(), head.rstrip()]
    for model in report.models:
        cells = [report.aggregate(model, k, m) for m, k in cols]
        lines.append(
            (f"{model:<{width}}" + "".join(f"{format_mean_std(a.mean, a.std):<12}" for a in cells)).rstrip()
        )
    lines.append("Values are mean(standard deviation in the last decimal place).")
    return "\n".join(lines) + "\n"


def plot_metric(report: MetricReport, metric: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for model in report.models:
        means = [report.aggregate(model, k, metric).mean for k in report.ks]
        ax.plot(report.ks, means, marker="o", label=model)
    ax.set_xlabel("K")
    ax.set_ylabel(f"{metric}@K")
    ax.set_xticks(report.ks)
    ax.set_title(f"Mean average {'precision' if metric == 'MAP' else 'recall'} @ K")
    ax.legend(fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the file bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: MetricReport, out_dir: str | Path) -> dict[str, Path]:
    """Write table5.csv, table5.txt, map_vs_k.png, mar_vs_k.png and report.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / "table5.csv",
        "txt": out_dir / "table5.txt",
        "map_plot": out_dir / "map_vs_k.png",
        "mar_plot": out_dir / "mar_vs_k.png",
        "json": out_dir / "report.json",
    }
    write_table_csv(report, paths["csv"])
    paths["txt"].write_text(render_table(report), encoding="utf-8")
    plot_metric(report, "MAP", paths["map_plot"])
    plot_metric(report, "MAR", paths["mar_plot"])
    paths["json"].write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    return paths
