"""Ablation grid: train and evaluate model variants on a synthetic corpus.

Each cell fixes a SIEF variant, an ``sf`` and an SDAF variant (or none).
Cells are trained on one split of the corpus and scored on a held-out
split, once per seed. The report lists mean (and spread) of mIoU, IoU_FG
and AP per cell and marks the default configuration with a dagger.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from sense.backbone import BackboneConfig, build_backbone
from sense.dataset import _as_loaded, synth_corpus
from sense.errors import ConfigError
from sense.evaluation import evaluate_referring
from sense.model import SenseModel
from sense.sdaf import SDAF_VARIANTS
from sense.sief import SIEF_VARIANTS
from sense.training import TrainConfig, fit

log = logging.getLogger(__name__)

DAGGER = "†"


@dataclass(frozen=True)
class Cell:
    sief: str = "attention"
    sf: int = 16
    sdaf: str = "two-layer"
    backbone: str = "toy-vit"

    def __post_init__(self):
        if self.sief not in SIEF_VARIANTS:
            raise ConfigError(f"cell: unknown SIEF variant {self.sief!r}")
        if self.sdaf not in SDAF_VARIANTS + ("off",):
            raise ConfigError(f"cell: unknown SDAF variant {self.sdaf!r}")
        if self.sf != 16 and self.sief != "attention":
            raise ConfigError(f"cell: sf={self.sf} only applies to attention SIEF, not {self.sief!r}")
        if self.sief == "off" and self.sdaf != "off":
            raise ConfigError("cell: the monocular baseline (SIEF off) cannot use SDAF")

    @classmethod
    def parse(cls, spec: dict) -> "Cell":
        spec = dict(spec)
        enabled = spec.pop("sdaf_enabled", None)
        unknown = set(spec) - {"sief", "sf", "sdaf", "backbone"}
        if unknown:
            raise ConfigError(f"cell: unknown keys {sorted(unknown)}")
        if enabled is False and spec.get("sdaf", "off") != "off":
            raise ConfigError(f"cell: SDAF variant {spec['sdaf']!r} given with SDAF disabled")
        if enabled is False:
            spec["sdaf"] = "off"
        return cls(**spec)

    @property
    def is_default(self) -> bool:
        return self == Cell()

    @property
    def label(self) -> str:
        if self.sief == "off":
            return "monocular baseline"
        sief = {"attention": "SIEF" if self.sf == 16 else f"SIEF sf={self.sf}",
                "concat-only": "Concat only"}[self.sief]
        sdaf = {"off": "no SDAF", "two-layer": "SDAF 2 layers", "three-layer": "SDAF 3 layers",
                "one-layer-low": "SDAF 1 layer (grid)", "one-layer-high": "SDAF 1 layer (full)"}[self.sdaf]
        return f"{sief} + {sdaf}"


# published ablation rows that apply to synthetic data (toy backbone)
ABLATION_GRID = (
    Cell(sief="off", sdaf="off"),
    Cell(),
    Cell(sdaf="three-layer"),
    Cell(sdaf="one-layer-low"),
    Cell(sdaf="one-layer-high"),
    Cell(sdaf="off"),
    Cell(sf=2, sdaf="off"),
    Cell(sief="concat-only", sdaf="off"),
)


@dataclass
class AblationSettings:
    resolution: int = 128
    n_train: int = 24
    n_eval: int = 8
    steps: int = 150
    batch_size: int = 8
    lr: float = 1e-2
    negative_fraction: float = 0.2
    seeds: tuple[int, ...] = (0, 1, 2)
    corpus_dir: str | None = None


@dataclass
class CellResult:
    cell: Cell
    per_seed: list[dict] = field(default_factory=list)

    def mean(self, metric: str) -> float:
        return statistics.fmean(r[metric] for r in self.per_seed)

    def std(self, metric: str) -> float:
        vals = [r[metric] for r in self.per_seed]
        return statistics.pstdev(vals) if len(vals) > 1 else 0.0

    def row(self) -> dict:
        out = {"label": self.cell.label, "default": self.cell.is_default, **asdict(self.cell)}
        for m in ("miou", "iou_fg", "ap"):
            out[m] = self.mean(m)
            out[f"{m}_std"] = self.std(m)
        out["seeds"] = len(self.per_seed)
        return out


def _backbone_cfg(cell: Cell, resolution: int) -> BackboneConfig:
    if cell.backbone == "toy-vit":
        return BackboneConfig(input_resolution=resolution)
    if cell.backbone == "reference-resnet50":
        return BackboneConfig.reference_resnet50(input_resolution=resolution)
    raise ConfigError(f"cell backbone {cell.backbone!r} is not available for desk-scale ablation")


def run_ablation(cells: Sequence[Cell], settings: AblationSettings | None = None, work_dir=None) -> list[CellResult]:
    s = settings or AblationSettings()
    cells = list(cells)
    if not cells:
        raise ConfigError("ablation grid is empty")
    results = {c: CellResult(c) for c in cells}
    caches: dict[str, dict] = {}
    for seed in s.seeds:
        corpus_dir = Path(s.corpus_dir or work_dir or ".") / f"corpus-{seed}"
        samples = _as_loaded(synth_corpus(s.n_train + s.n_eval, s.resolution, seed, corpus_dir))
        train, held_out = samples[: s.n_train], samples[s.n_train:]
        for cell in cells:
            tcfg = TrainConfig(batch_size=s.batch_size, lr=s.lr, total_steps=s.steps,
                               negative_fraction=s.negative_fraction, resolution=s.resolution,
                               sdaf_variant=cell.sdaf, sief_variant=cell.sief, sf=cell.sf, seed=seed)
            bb = _backbone_cfg(cell, s.resolution)
            model = SenseModel(tcfg.model_config(bb), build_backbone(bb))
            cache = caches.setdefault(f"{cell.backbone}-{seed}", {})
            fit(model, train, tcfg, feature_cache=cache)
            rep = evaluate_referring(model, held_out)
            results[cell].per_seed.append({"seed": seed, "miou": rep.miou, "iou_fg": rep.iou_fg, "ap": rep.ap})
            log.info("seed %d %-32s mIoU %.3f IoU_FG %.3f AP %.3f", seed, cell.label, rep.miou, rep.iou_fg, rep.ap)
    return [results[c] for c in cells]


CSV_FIELDS = ("label", "default", "backbone", "sief", "sf", "sdaf", "miou", "miou_std", "iou_fg", "iou_fg_std",
              "ap", "ap_std", "seeds")


def to_csv(results: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()


def _mark(cell: Cell, text: str) -> str:
    return text + DAGGER if cell.is_default else text


def format_table(results: Sequence[CellResult]) -> str:
    """Plain-text table with the published ablation columns (percent, mean over seeds)."""
    head = f"{'Method':<20}{'Backbone':<20}{'SIEF':<14}{'SDAF':<18}{'mIoU':>9}{'IoU_FG':>9}{'AP':>9}"
    lines = [head, "-" * len(head)]
    for r in results:
        c = r.cell
        method = "monocular" if c.sief == "off" else "SENSE"
        sief = {"off": "no", "attention": "yes" if c.sf == 16 else f"sf={c.sf}", "concat-only": "concat"}[c.sief]
        sdaf = {"off": "no", "two-layer": "yes", "three-layer": "3 layers", "one-layer-low": "1 layer (grid)",
                "one-layer-high": "1 layer (full)"}[c.sdaf]
        nums = "".join(f"{_mark(c, f'{100 * r.mean(m):.1f}'):>9}" for m in ("miou", "iou_fg", "ap"))
        lines.append(f"{method:<20}{c.backbone:<20}{_mark(c, sief):<14}{_mark(c, sdaf):<18}{nums}")
    lines.append(f"{DAGGER} default configuration; values are means over {len(results[0].per_seed)} seed(s).")
    return "\n".join(lines)


def directional_check(results: Sequence[CellResult], tolerance: float = 0.02) -> tuple[bool, float]:
    """``AP(SDAF off) - AP(default) <= tolerance``; returns (ok, difference)."""
    by_cell = {r.cell: r for r in results}
    default, off = by_cell.get(Cell()), by_cell.get(Cell(sdaf="off"))
    if default is None or off is None:
        raise ConfigError("directional check needs both the default and the SDAF-off cells")
    diff = off.mean("ap") - default.mean("ap")
    return diff <= tolerance, diff
