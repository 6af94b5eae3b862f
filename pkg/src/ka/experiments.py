"""The experiment grid: baselines, the full method, and its ablations.

Nine named experiments cover four single- or dual-model baselines, the
plain multi-task baseline, the full cross pseudo-supervision method, and
three ablation variants of its consistency construction. Each name maps
onto a (architecture, loss flags, trainer variant) triple:

  reid_only     single model, identity head, supervised only, A data only
  par_only      single model, attribute head, supervised only, B data only
  reid_ssl      dual instances, identity head, supervised + identity-task
                consistency on the (unlabeled) B images
  par_ssl       dual instances, attribute head, supervised + attribute-task
                consistency on the (unlabeled) A images
  mtl_baseline  single model, both heads, supervised only
  ka            dual instances, both heads, full objective
  ka_imgaug     single model, weak/strong view consistency instead of the
                second instance (weak view is the pseudo-label side)
  ka_netaug     ka without the feature-triplet consistency terms
  ka_netaug_tri alias of ka (triplet terms included)

Results are written as one ReportRow per (experiment, seed), plus a CSV
table of per-experiment seed means and a JSON sidecar with full configs.
"""

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import load_dataset, make_synthetic_pair
from .metrics import MetricsReport, ParMetrics, ReidMetrics
from .model import ArchConfig
from .losses import LossConfig
from .trainer import TrainConfig, evaluate_par, evaluate_reid, save_model, train

EXPERIMENT_NAMES = ("reid_only", "par_only", "reid_ssl", "par_ssl",
                    "mtl_baseline", "ka", "ka_imgaug", "ka_netaug", "ka_netaug_tri")

CSV_COLUMNS = ["name", "seed", "reid_map", "reid_rank1", "reid_rank5", "reid_rank10",
               "par_ma", "par_f1", "par_precision", "par_recall", "config_digest"]


@dataclass
class SyntheticSpec:
    """Desk-scale synthetic data source. The actual generation seed mixes
    this seed with the run seed, and the test pair uses a further offset
    so its identities are disjoint from training."""

    num_ids: int = 6
    num_attributes: int = 4
    samples_per_dataset: int = 96
    image_size: tuple[int, int] = (32, 16)
    seed: int = 0
    test_samples: int = 72


@dataclass
class ManifestSpec:
    """File-backed data source: train manifests plus published test splits."""

    train_a: str
    train_b: str
    test_query: str
    test_gallery: str
    test_par: str
    image_size: tuple[int, int] | None = None


@dataclass
class ExperimentSpec:
    name: str
    train: TrainConfig
    data: SyntheticSpec | ManifestSpec
    output_dir: str = "ka_runs"

    def __post_init__(self):
        if self.name not in EXPERIMENT_NAMES:
            raise ValueError(f"unknown experiment {self.name!r}, expected one of {EXPERIMENT_NAMES}")


@dataclass
class ReportRow:
    name: str
    seed: int | str
    reid: ReidMetrics | None
    par: ParMetrics | None
    config_digest: str
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.reid is None and self.par is None:
            raise ValueError("a report row needs at least one metric block")


def configure(name: str, base: TrainConfig) -> tuple[TrainConfig, str]:
    """Derive the per-experiment (config, trainer variant) from a base
    config whose arch carries the full head widths."""
    arch, loss = base.arch, base.loss
    if name == "reid_only":
        return replace(base, arch=replace(arch, num_attributes=0, dataset_head=False)), "single"
    if name == "par_only":
        return replace(base, arch=replace(arch, num_ids=0, dataset_head=False)), "single"
    if name == "reid_ssl":
        return replace(base, arch=replace(arch, num_attributes=0, dataset_head=True),
                       loss=replace(loss, include_labeled_consistency=False)), "dual"
    if name == "par_ssl":
        return replace(base, arch=replace(arch, num_ids=0, dataset_head=False),
                       loss=replace(loss, include_labeled_consistency=False)), "dual"
    if name == "mtl_baseline":
        return replace(base, arch=replace(arch, dataset_head=False),
                       loss=replace(loss, lam=0.0)), "single"
    if name in ("ka", "ka_netaug_tri"):
        return base, "dual"
    if name == "ka_netaug":
        return replace(base, loss=replace(loss, include_triplet=False)), "dual"
    if name == "ka_imgaug":
        return base, "imgaug"
    raise ValueError(f"unknown experiment {name!r}")


def _mix_seed(data_seed: int, run_seed: int) -> int:
    return data_seed * 100003 + run_seed


def resolve_data(data, run_seed: int):
    """Materialize (train_a, train_b, test_query, test_gallery, test_par)."""
    if isinstance(data, SyntheticSpec):
        base = _mix_seed(data.seed, run_seed)
        train_a, train_b = make_synthetic_pair(
            data.num_ids, data.num_attributes, data.samples_per_dataset,
            tuple(data.image_size), base)
        test_a, test_b = make_synthetic_pair(
            data.num_ids, data.num_attributes, data.test_samples,
            tuple(data.image_size), base + 7919)
        return train_a, train_b, test_a, test_a, test_b
    size = tuple(data.image_size) if data.image_size else None
    train_a = load_dataset(data.train_a, image_size=size)
    train_b = load_dataset(data.train_b, image_size=size)
    test_q = load_dataset(data.test_query, image_size=size)
    test_g = load_dataset(data.test_gallery, image_size=size)
    test_par = load_dataset(data.test_par, image_size=size)
    return train_a, train_b, test_q, test_g, test_par


def config_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def run_experiment(spec: ExperimentSpec, quiet: bool = False) -> ReportRow:
    """Train one experiment, evaluate the kept model on the test splits,
    and persist its log, model file, and report row under output_dir."""
    train_a, train_b, test_q, test_g, test_par = resolve_data(spec.data, spec.train.seed)
    base = replace(spec.train, arch=replace(
        spec.train.arch, num_ids=train_a.num_ids, num_attributes=train_b.num_attributes))
    cfg, variant = configure(spec.name, base)

    out = Path(spec.output_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(parents=True, exist_ok=True)
    tag = f"{spec.name}_seed{cfg.seed}"

    run = train(train_a, train_b, cfg, variant=variant,
                log_path=out / "logs" / f"{tag}.jsonl")

    reid = evaluate_reid(run.best_model, test_q, test_g) if cfg.arch.has_reid else None
    par = evaluate_par(run.best_model, test_par) if cfg.arch.has_par else None
    save_model(out / "models" / f"{tag}.pt", run.best_model, cfg, run.best_side)

    config = {"name": spec.name, "variant": variant, "train": asdict(cfg),
              "data": asdict(spec.data)}
    row = ReportRow(name=spec.name, seed=cfg.seed, reid=reid, par=par,
                    config_digest=config_digest(config), config=config)
    if not quiet:
        print(f"[{tag}] best={run.best_side} " + _row_summary(row), file=sys.stderr)
    return row


def _row_summary(row: ReportRow) -> str:
    parts = []
    if row.reid is not None:
        parts.append(f"mAP={row.reid.map:.3f} rank1={row.reid.cmc.get(1, float('nan')):.3f}")
    if row.par is not None:
        parts.append(f"ma={row.par.ma:.3f} F1={row.par.f1:.3f}")
    return " ".join(parts)


def run_grid(data, out_dir, seeds=(1, 2, 3), names=EXPERIMENT_NAMES,
             base_train: TrainConfig | None = None, quiet: bool = False) -> list[ReportRow]:
    """Run every named experiment under every seed; write rows.json and
    the seed-mean table.csv under out_dir."""
    if base_train is None:
        base_train = default_train_config()
    rows = []
    for name in names:
        for seed in seeds:
            spec = ExperimentSpec(name=name, train=replace(base_train, seed=seed),
                                  data=data, output_dir=str(out_dir))
            rows.append(run_experiment(spec, quiet=quiet))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_rows(rows, out / "rows.json")
    emit_report(aggregate_mean(rows), out / "table.csv")
    return rows


def default_train_config() -> TrainConfig:
    """Desk-scale defaults for the synthetic grid (widths filled from data)."""
    return TrainConfig(arch=ArchConfig(trunk="tiny_conv", feature_dim=64),
                       loss=LossConfig(), epochs=8, batch_size=16, lr0=3e-3,
                       eval_every=2, ratio_a=0.5)


def aggregate_mean(rows: list[ReportRow]) -> list[ReportRow]:
    """One row per experiment name: the arithmetic mean over its seeds."""
    if not rows:
        raise ValueError("no rows to aggregate")
    by_name: dict[str, list[ReportRow]] = {}
    for r in rows:
        by_name.setdefault(r.name, []).append(r)
    out = []
    for name, group in by_name.items():
        n = len(group)
        reid = None
        if group[0].reid is not None:
            ranks = sorted(group[0].reid.cmc)
            reid = ReidMetrics(
                map=sum(r.reid.map for r in group) / n,
                cmc={k: sum(r.reid.cmc[k] for r in group) / n for k in ranks})
        par = None
        if group[0].par is not None:
            par = ParMetrics(
                ma=sum(r.par.ma for r in group) / n,
                precision=sum(r.par.precision for r in group) / n,
                recall=sum(r.par.recall for r in group) / n,
                f1=sum(r.par.f1 for r in group) / n)
        digest = config_digest({"members": sorted(r.config_digest for r in group)})
        seeds = ",".join(str(r.seed) for r in group)
        out.append(ReportRow(name=name, seed=f"mean({seeds})", reid=reid, par=par,
                             config_digest=digest,
                             config={"members": [r.config_digest for r in group]}))
    return out


def row_to_dict(row: ReportRow) -> dict:
    d = {"name": row.name, "seed": row.seed, "config_digest": row.config_digest,
         "config": row.config, "reid": None, "par": None}
    if row.reid is not None:
        d["reid"] = {"map": row.reid.map,
                     "cmc": {str(k): v for k, v in row.reid.cmc.items()}}
    if row.par is not None:
        d["par"] = {"ma": row.par.ma, "precision": row.par.precision,
                    "recall": row.par.recall, "f1": row.par.f1}
    return d


def row_from_dict(d: dict) -> ReportRow:
    reid = None
    if d.get("reid") is not None:
        reid = ReidMetrics(map=d["reid"]["map"],
                           cmc={int(k): v for k, v in d["reid"]["cmc"].items()})
    par = None
    if d.get("par") is not None:
        par = ParMetrics(**d["par"])
    return ReportRow(name=d["name"], seed=d["seed"], reid=reid, par=par,
                     config_digest=d["config_digest"], config=d.get("config") or {})


def save_rows(rows: list[ReportRow], path):
    Path(path).write_text(json.dumps([row_to_dict(r) for r in rows], indent=2))


def load_rows(path) -> list[ReportRow]:
    return [row_from_dict(d) for d in json.loads(Path(path).read_text())]


def emit_report(rows: list[ReportRow], path):
    """Write the metric table as CSV (one line per row) plus a JSON
    sidecar carrying the full configs."""
    if not rows:
        raise ValueError("no rows to report")
    path = Path(path)
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        vals = {"name": r.name, "seed": str(r.seed), "config_digest": r.config_digest}
        if r.reid is not None:
            vals["reid_map"] = f"{r.reid.map:.6f}"
            for k in (1, 5, 10):
                if k in r.reid.cmc:
                    vals[f"reid_rank{k}"] = f"{r.reid.cmc[k]:.6f}"
        if r.par is not None:
            vals["par_ma"] = f"{r.par.ma:.6f}"
            vals["par_f1"] = f"{r.par.f1:.6f}"
            vals["par_precision"] = f"{r.par.precision:.6f}"
            vals["par_recall"] = f"{r.par.recall:.6f}"
        lines.append(",".join(vals.get(c, "") for c in CSV_COLUMNS))
    path.write_text("\n".join(lines) + "\n")
    path.with_suffix(".json").write_text(
        json.dumps([row_to_dict(r) for r in rows], indent=2))
    return path


def parse_report(path) -> list[ReportRow]:
    """Read back an emitted CSV (metrics only, no configs)."""
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    if header != CSV_COLUMNS:
        raise ValueError(f"unexpected report header: {header}")
    rows = []
    for line in lines[1:]:
        vals = dict(zip(header, line.split(",")))
        reid = None
        if vals["reid_map"]:
            reid = ReidMetrics(map=float(vals["reid_map"]),
                               cmc={k: float(vals[f"reid_rank{k}"]) for k in (1, 5, 10)
                                    if vals[f"reid_rank{k}"]})
        par = None
        if vals["par_ma"]:
            par = ParMetrics(ma=float(vals["par_ma"]), precision=float(vals["par_precision"]),
                             recall=float(vals["par_recall"]), f1=float(vals["par_f1"]))
        rows.append(ReportRow(name=vals["name"], seed=vals["seed"], reid=reid, par=par,
                              config_digest=vals["config_digest"]))
    return rows


def _build(dc, payload: dict, path_hint: str):
    unknown = set(payload) - {f for f in dc.__dataclass_fields__}
    if unknown:
        raise ValueError(f"unknown {dc.__name__} fields in {path_hint}: {sorted(unknown)}")
    return dc(**payload)


def load_spec(path) -> ExperimentSpec:
    """Read a declarative experiment spec from a JSON or TOML file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        payload = tomllib.loads(text)
    else:
        payload = json.loads(text)

    train_d = dict(payload.get("train", {}))
    arch = _build(ArchConfig, dict(train_d.pop("arch", {})), str(path))
    loss = _build(LossConfig, dict(train_d.pop("loss", {})), str(path))
    train_cfg = _build(TrainConfig, {"arch": arch, "loss": loss, **train_d}, str(path))

    data_d = payload.get("data", {"synthetic": {}})
    if "synthetic" in data_d:
        data = _build(SyntheticSpec, dict(data_d["synthetic"]), str(path))
        data = replace(data, image_size=tuple(data.image_size))
    elif "manifests" in data_d:
        data = _build(ManifestSpec, dict(data_d["manifests"]), str(path))
        if data.image_size is not None:
            data = replace(data, image_size=tuple(data.image_size))
    else:
        raise ValueError(f"{path}: data must contain 'synthetic' or 'manifests'")

    return ExperimentSpec(name=payload["name"], train=train_cfg, data=data,
                          output_dir=payload.get("output_dir", "ka_runs"))
