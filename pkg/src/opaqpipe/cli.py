"""Command-line driver: data generation, training, inference, evaluation, report.

Every subcommand reads one flat JSON run configuration (``--config``) with
optional ``--set key=value`` overrides; every artifact lands under
``workdir``.  Layout::

    workdir/data/{train,val,test,empty}/   scenes + manifest.json
    workdir/ckpt/{opacifier,mrm,depth}.npz
    workdir/logs/*.csv                     training logs, MRM IoU
    workdir/out/<mode>/                    composites, masks, depth, manifest
    workdir/eval/<mode>.csv|.json          per-sample metrics and means
    workdir/report.csv                     modes × regions × metrics
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import deptheval, maskops, scenegen, storage
from .mrm import MrmTrainCfg, evaluate_mrm, load_mrm, train_mrm, write_iou_report
from .opacifier import (OpacifierLossConfig, OpacifierTrainCfg, PatchSet, load_opacifier,
                        train_opacifier)
from .pipeline import MODES, Models, PipelineCfg, run_pipeline_batch
from .schedule import build_schedule
from .tensorgrad import load_checkpoint
from .toydepth import DepthTrainCfg, load_depthnet, train_depthnet
from .unipc import SolverConfig

SUBCOMMANDS = ("gen-data", "train-opacifier", "train-mrm", "train-depth", "run-pipeline",
               "eval", "report")
REPORT_COLUMNS = ["mode", "region", *deptheval.METRICS, "n_images"]
CHUNK = 16


class CliError(Exception):
    """A user-facing failure reported as a one-line diagnostic."""


@dataclass(frozen=True)
class RunConfig:
    workdir: str = "run"
    seed: int = 0
    image_size: int = 64
    n_train: int = 500
    n_val: int = 60
    n_test: int = 100
    n_empty: int = 100
    T: int = 1000
    beta_min: float = 8.5e-4
    beta_max: float = 1.2e-2
    solver_steps: int = 10
    solver_order: int = 3
    solver_b_variant: str = "exp"
    solver_spacing: str = "time_uniform"
    solver_corrector: bool = True
    solver_lower_order_final: bool = True
    cond_mode: str = "mask"
    pipeline_mode: str = "opacify"
    pipeline_mask_augment: bool = False
    patch_size: int = 32
    crop_margin: float = 1.25
    loss_variant: str = "lpips"
    loss_lambda: float = 0.05
    loss_gate_tau: float = 0.3
    opacifier_iterations: int = 2500
    opacifier_batch_size: int = 4
    opacifier_lr: float = 1e-3
    opacifier_augment: bool = True
    mrm_epochs: int = 6
    mrm_batch_size: int = 16
    mrm_lr: float = 1e-3
    mrm_lambda_mid: float = 0.1
    depth_iterations: int = 600
    depth_batch_size: int = 8
    depth_lr: float = 1e-3
    eval_domain: str = "none"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise CliError(f"unknown config key {unknown[0]!r}")
        clean = {}
        for k, v in d.items():
            ftype = type(getattr(cls, k))
            if ftype is bool and not isinstance(v, bool):
                raise CliError(f"config key {k!r} must be true/false, got {v!r}")
            if ftype is int and (isinstance(v, bool) or not isinstance(v, int)):
                raise CliError(f"config key {k!r} must be an integer, got {v!r}")
            if ftype is float:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise CliError(f"config key {k!r} must be a number, got {v!r}")
                v = float(v)
            if ftype is str and not isinstance(v, str):
                raise CliError(f"config key {k!r} must be a string, got {v!r}")
            clean[k] = v
        cfg = cls(**clean)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.solver()
            self.pipeline()
            self.loss()
            build_schedule(self.T, self.beta_min, self.beta_max)
        except ValueError as exc:
            raise CliError(f"invalid config: {exc}") from exc
        if self.eval_domain not in ("none", "depth", "disparity"):
            raise CliError(f"invalid config: unknown eval domain {self.eval_domain!r}")
        for k in ("n_train", "n_val", "n_test", "image_size"):
            if getattr(self, k) < 1:
                raise CliError(f"invalid config: {k} must be >= 1")

    def solver(self) -> SolverConfig:
        return SolverConfig(steps=self.solver_steps, order=self.solver_order,
                            b_variant=self.solver_b_variant, spacing=self.solver_spacing,
                            lower_order_final=self.solver_lower_order_final,
                            corrector=self.solver_corrector)

    def pipeline(self, mode: str | None = None) -> PipelineCfg:
        return PipelineCfg(mode=mode or self.pipeline_mode, cond_mode=self.cond_mode,
                           solver=self.solver(), patch_size=self.patch_size,
                           margin=self.crop_margin, seed=self.seed)

    def loss(self) -> OpacifierLossConfig:
        return OpacifierLossConfig(lambda_lpips=self.loss_lambda, gate_tau=self.loss_gate_tau,
                                   variant=self.loss_variant)

    def path(self, *parts: str) -> str:
        return os.path.join(self.workdir, *parts)


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise CliError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise CliError(f"config {path} must be a JSON object")
    for item in overrides:
        k, v = parse_override(item)
        data[k] = v
    return RunConfig.from_dict(data)


def n_threads() -> int:
    raw = os.environ.get("OPAQPIPE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"OPAQPIPE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# ---------------------------------------------------------------------------
# subcommands

def _load_split(cfg: RunConfig, split: str) -> list[scenegen.ScenePair]:
    path = cfg.path("data", split)
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise CliError(f"missing dataset {path}; run gen-data first")
    return scenegen.load_dataset(path)


def _require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"missing checkpoint for stage {stage}: {path}")
    return path


def cmd_gen_data(cfg: RunConfig, args) -> None:
    plan = [("train", "train", cfg.seed, cfg.n_train, None),
            ("val", "val", cfg.seed, cfg.n_val, None),
            ("test", "test", cfg.seed, cfg.n_test, None),
            ("empty", "train", cfg.seed + 1, cfg.n_empty, 0)]
    for name, split, base, n, n_obj in plan:
        if n > 0:
            scenegen.generate_dataset(n, base, split, out_dir=cfg.path("data", name),
                                      size=cfg.image_size, n_objects=n_obj)


def cmd_train_opacifier(cfg: RunConfig, args) -> None:
    table = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    tcfg = OpacifierTrainCfg(iterations=cfg.opacifier_iterations,
                             batch_size=cfg.opacifier_batch_size, lr=cfg.opacifier_lr,
                             seed=cfg.seed, augment=cfg.opacifier_augment,
                             cond_mode=cfg.cond_mode, loss=cfg.loss())
    os.makedirs(cfg.path("ckpt"), exist_ok=True)
    os.makedirs(cfg.path("logs"), exist_ok=True)
    data = PatchSet(_load_split(cfg, "train"), size=cfg.patch_size, margin=cfg.crop_margin)
    train_opacifier(data, tcfg, table, log_path=cfg.path("logs", "opacifier.csv"),
                    ckpt_path=cfg.path("ckpt", "opacifier.npz"))


def cmd_train_mrm(cfg: RunConfig, args) -> None:
    tcfg = MrmTrainCfg(lr=cfg.mrm_lr, batch_size=cfg.mrm_batch_size, epochs=cfg.mrm_epochs,
                       lambda_mid=cfg.mrm_lambda_mid, seed=cfg.seed)
    os.makedirs(cfg.path("ckpt"), exist_ok=True)
    os.makedirs(cfg.path("logs"), exist_ok=True)
    data = PatchSet(_load_split(cfg, "train"), size=cfg.patch_size, margin=cfg.crop_margin)
    net, _ = train_mrm(data, tcfg, log_path=cfg.path("logs", "mrm.csv"),
                       ckpt_path=cfg.path("ckpt", "mrm.npz"))
    val = PatchSet(_load_split(cfg, "val"), size=cfg.patch_size, margin=cfg.crop_margin)
    write_iou_report(cfg.path("logs", "mrm_iou.csv"), evaluate_mrm(net, val, cfg.seed + 12345))


def cmd_train_depth(cfg: RunConfig, args) -> None:
    tcfg = DepthTrainCfg(iterations=cfg.depth_iterations, batch_size=cfg.depth_batch_size,
                         lr=cfg.depth_lr, seed=cfg.seed)
    os.makedirs(cfg.path("ckpt"), exist_ok=True)
    os.makedirs(cfg.path("logs"), exist_ok=True)
    empty = _load_split(cfg, "empty") if cfg.n_empty > 0 else []
    train_depthnet(_load_split(cfg, "train"), empty, tcfg,
                   log_path=cfg.path("logs", "depth.csv"), ckpt_path=cfg.path("ckpt", "depth.npz"))


def load_models(cfg: RunConfig, mode: str) -> Models:
    depth = load_depthnet(_require(cfg.path("ckpt", "depth.npz"), "depth"))
    if mode != "opacify":
        return Models(depth)
    opq = load_opacifier(_require(cfg.path("ckpt", "opacifier.npz"), "opacifier"))
    arch = load_checkpoint(cfg.path("ckpt", "opacifier.npz")).arch
    if (arch["T"], arch["beta_min"], arch["beta_max"]) != (cfg.T, cfg.beta_min, cfg.beta_max):
        raise CliError("opacifier checkpoint was trained with a different schedule")
    mrm = load_mrm(_require(cfg.path("ckpt", "mrm.npz"), "mrm"))
    return Models(depth, opq, mrm, build_schedule(cfg.T, cfg.beta_min, cfg.beta_max))


def pipeline_masks(cfg: RunConfig, pairs: list[scenegen.ScenePair]) -> np.ndarray:
    """The masks handed to the pipeline: ground truth, optionally perturbed."""
    out = []
    for i, p in enumerate(pairs):
        m = p.union_mask
        if cfg.pipeline_mask_augment and m.any():
            m = maskops.augment_mask(m, cfg.seed * 100003 + i)
        out.append(m)
    return np.stack(out)


def cmd_run_pipeline(cfg: RunConfig, args) -> None:
    mode = cfg.pipeline_mode
    models = load_models(cfg, mode)
    pcfg = cfg.pipeline(mode)
    pairs = _load_split(cfg, "test")
    images = np.stack([p.I_tr for p in pairs])
    masks = pipeline_masks(cfg, pairs)
    chunks = [list(range(s, min(s + CHUNK, len(pairs)))) for s in range(0, len(pairs), CHUNK)]

    def work(idx):
        return run_pipeline_batch(images[idx], masks[idx], models, pcfg, keys=idx)

    with ThreadPoolExecutor(max_workers=n_threads()) as pool:
        results = [r for chunk in pool.map(work, chunks) for r in chunk]

    out_dir = cfg.path("out", mode)
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for p, res in zip(pairs, results):
        sid = p.manifest["id"]
        names = {"blend": f"{sid}_blend.ppm", "depth": f"{sid}_depth.pfm",
                 "mask": f"{sid}_blendmask.pgm"}
        storage.write_ppm(os.path.join(out_dir, names["blend"]), np.clip(res.I_blend, 0, 1))
        storage.write_pfm(os.path.join(out_dir, names["depth"]), res.depth)
        storage.write_pgm(os.path.join(out_dir, names["mask"]), res.blend_mask)
        records.append({"id": sid, **names, "instances": len(res.instances)})
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(storage.dumps_json({"mode": mode, "samples": records}))


def cmd_eval(cfg: RunConfig, args) -> None:
    mode = cfg.pipeline_mode
    out_dir = cfg.path("out", mode)
    manifest = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(manifest):
        raise CliError(f"no pipeline outputs in {out_dir}; run run-pipeline first")
    with open(manifest, encoding="utf-8") as fh:
        outputs = {r["id"]: r for r in json.load(fh)["samples"]}
    samples = []
    for p in _load_split(cfg, "test"):
        sid = p.manifest["id"]
        if sid not in outputs:
            raise CliError(f"pipeline output missing sample {sid}")
        pred = storage.read_pfm(os.path.join(out_dir, outputs[sid]["depth"])).astype(np.float64)
        samples.append((sid, pred, p.depth, p.union_mask))
    rows = deptheval.evaluate_samples(samples, cfg.eval_domain)
    os.makedirs(cfg.path("eval"), exist_ok=True)
    deptheval.write_report(cfg.path("eval", f"{mode}.csv"), cfg.path("eval", f"{mode}.json"),
                           rows, {"mode": mode, "domain": cfg.eval_domain})


def report_rows(evals: dict[str, list[dict]]) -> list[dict]:
    """Mode × region table of mean metrics; modes in sorted order."""
    rows = []
    for mode in sorted(evals):
        agg = deptheval.aggregate(evals[mode])
        for region in deptheval.REGIONS:
            a = agg[region]
            rows.append({"mode": mode, "region": region, "n_images": a["n_images"],
                         **{k: ("nan" if a[k] is None else a[k]) for k in deptheval.METRICS}})
    return rows


def cmd_report(cfg: RunConfig, args) -> None:
    paths = args.evals or [cfg.path("eval", f"{m}.csv") for m in MODES
                           if os.path.exists(cfg.path("eval", f"{m}.csv"))]
    if not paths:
        raise CliError(f"no eval outputs found in {cfg.path('eval')}")
    evals = {}
    for path in paths:
        mode = os.path.splitext(os.path.basename(path))[0]
        try:
            evals[mode] = deptheval.read_report(path)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read eval output {path}: {exc}") from exc
    ids = {m: sorted({r["sample_id"] for r in rows}) for m, rows in evals.items()}
    if len({tuple(v) for v in ids.values()}) > 1:
        raise CliError("eval outputs cover different sample ids")
    out = args.out or cfg.path("report.csv")
    storage.write_csv(out, REPORT_COLUMNS, report_rows(evals))


HANDLERS = {"gen-data": cmd_gen_data, "train-opacifier": cmd_train_opacifier,
            "train-mrm": cmd_train_mrm, "train-depth": cmd_train_depth,
            "run-pipeline": cmd_run_pipeline, "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opaqpipe",
                                     description="Opacify transparent objects before depth estimation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (JSON value)")
        if name == "report":
            p.add_argument("evals", nargs="*", help="eval CSVs (default: every mode in workdir/eval)")
            p.add_argument("--out", help="report CSV path (default: workdir/report.csv)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)   # exits 2 on usage errors
    try:
        cfg = load_config(args.config, args.set)
        HANDLERS[args.command](cfg, args)
    except CliError as exc:
        print(f"opaqpipe {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"opaqpipe {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
