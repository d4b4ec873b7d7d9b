"""Figure runs: estimator cosines over training, spectrum ratios, batch sweeps.

Every run returns its rows and, via :func:`write_run`, leaves a CSV plus a
``manifest.json`` holding the resolved config in the output directory.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

from .. import curvature, data, metrics, models, optim
from ..errors import ConfigError
from .config import Estimator, dumps

CSV_HEADER = ("step", "target", "estimator", "cosine", "method", "batch_size", "label_mode",
              "seed")
RATIO_NAMES = ("ratio_opt", "ratio_L", "ratio_R")


# --------------------------------------------------------------------------
# building blocks from a resolved config


def build_dataset(cfg) -> data.Dataset:
    ds_cfg = cfg["dataset"]
    kind = ds_cfg["kind"]
    if kind == "synth":
        return data.synth_gaussian_classes(ds_cfg["d"], ds_cfg["num_classes"],
                                           ds_cfg["n_per_class"], ds_cfg["separation"],
                                           cfg["seed"])
    if kind == "npz":
        _require_path(ds_cfg["path"], "dataset.path")
        return data.load_npz(ds_cfg["path"])
    _require_path(ds_cfg["images"], "dataset.images")
    _require_path(ds_cfg["labels"], "dataset.labels")
    ds = data.load_idx(ds_cfg["images"], ds_cfg["labels"], ds_cfg["normalization"])
    if ds_cfg["keep"] is not None:
        ds = data.subsample_classes(ds, ds_cfg["keep"])
    if ds_cfg["downsample"] > 1:
        ds = data.downsample(ds, ds_cfg["downsample"])
    if ds_cfg["limit"] is not None:
        ds = data.take(ds, ds_cfg["limit"])
    return ds


def _require_path(path, key):
    if not Path(path).is_file():
        raise ConfigError(f"{key}: file {path!r} does not exist")


def build_model(cfg, ds: data.Dataset) -> models.Model:
    model_cfg = cfg["model"]
    try:
        mc = models.ModelConfig(
            kind=model_cfg["kind"],
            input_dim=model_cfg["input_dim"] or ds.dim,
            num_classes=model_cfg["num_classes"] or ds.num_classes,
            hidden_dim=model_cfg["hidden_dim"],
            probe_layer=model_cfg["probe_layer"],
            activation=model_cfg["activation"],
            init_seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    if mc.input_dim != ds.dim:
        raise ConfigError(f"model.input_dim: {mc.input_dim} does not match data dim {ds.dim}")
    if mc.num_classes < ds.num_classes:
        raise ConfigError(f"model.num_classes: data has {ds.num_classes} classes")
    return models.Model.init(mc)


def build_train_config(cfg) -> optim.TrainConfig:
    t = cfg["train"]
    sched = None if t["probe_schedule"] is None else tuple(t["probe_schedule"])
    return optim.TrainConfig(
        optimizer=t["optimizer"], lr=t["lr"], momentum=t["momentum"],
        shampoo_lambda=t["shampoo_lambda"], shampoo_eps=t["shampoo_eps"],
        exponent=t["exponent"], batch_size=t["batch_size"], steps=t["steps"],
        seed=cfg["seed"], probe_schedule=sched,
    )


def training_events(cfg, ds, model):
    """Yield ``TrainEvent``s of the configured run."""
    return optim.Trainer(model, ds, build_train_config(cfg)).run()


def _row(step, target, estimator, cosine, method, seed, batch_size=None, label_mode=None):
    return {
        "step": step, "target": target, "estimator": estimator, "cosine": float(cosine),
        "method": method, "batch_size": batch_size, "label_mode": label_mode, "seed": seed,
    }


def _sort(rows):
    return sorted(rows, key=lambda r: (r["step"], r["target"], r["estimator"],
                                       r["batch_size"] or 0, r["label_mode"] or ""))


# --------------------------------------------------------------------------
# estimators


def estimate(est: Estimator, e: models.GradientEnsemble, H=None, model=None, ds=None,
             layer=None):
    """Kronecker factors of ``est`` for the distribution ``e``.

    ``opt_kron`` uses the dense rearranged ``H`` when given and the
    matrix-free ensemble route otherwise.  ``kfac`` needs the model and data.
    """
    if est.kind == "shampoo":
        return curvature.shampoo_factors(e)
    if est.kind == "shampoo_sq":
        return curvature.shampoo_sq_factors(e)
    if est.kind == "opt_kron":
        if H is not None:
            return curvature.opt_kron_factors(H, est.steps)
        return curvature.power_iteration_factors(e, est.steps)
    return curvature.kfac_factors(model, ds, "sampled", layer)


def _estimators(cfg):
    return [Estimator.parse(name) for name in cfg["estimators"]]


# --------------------------------------------------------------------------
# figure 1: estimator quality along training


def run_figure1(cfg):
    """Cosine of each estimator against ``H_GN`` and ``H_Ada`` at every probe step."""
    ds = build_dataset(cfg)
    model = build_model(cfg, ds)
    tc = build_train_config(cfg)
    layer = model.config.probe_layer
    m, n = model.probe_shape
    seed, method = cfg["seed"], cfg["cosine_method"]
    exact = method == "exact"
    targets = cfg["curvature_targets"]
    ests = _estimators(cfg)
    schedule = set(tc.schedule())

    acc = curvature.AdagradAccumulator.zeros(m, n, exact=exact)
    bank = None if exact else metrics.ProbeBank.create(m * n, cfg["num_probes"], seed)
    history = []
    rows = []
    for ev in optim.Trainer(model, ds, tc).run():
        G = ev.grads[layer]
        acc = curvature.adagrad_update(acc, G)
        history.append(G)
        if bank is not None:
            bank = metrics.adagrad_hv(bank, G)
        if ev.step not in schedule:
            continue
        if "gn" in targets:
            e = models.gn_ensemble_exact(ev.model, ds, layer)
            if exact:
                H = curvature.assemble(e, "gn_exact")
                for est in ests:
                    K = estimate(est, e, H, ev.model, ds, layer)
                    rows.append(_row(ev.step, "gn", est.name,
                                     metrics.cosine_similarity_kron(K, H), method, seed))
            else:
                hv = metrics.ensemble_operator(e)
                for est in ests:
                    K = estimate(est, e, None, ev.model, ds, layer)
                    rows.append(_row(ev.step, "gn", est.name,
                                     metrics.probe_cosine(hv, K, m * n, cfg["num_probes"], seed),
                                     method, seed))
        if "adagrad" in targets:
            for est in ests:
                if est.kind == "kfac":
                    continue  # K-FAC has no running-gradient analogue
                if est.kind == "shampoo":
                    K = acc.shampoo()
                elif est.kind == "shampoo_sq":
                    K = acc.shampoo_sq()
                elif exact:
                    K = curvature.opt_kron_factors(acc.curvature(), est.steps)
                else:
                    K = curvature.power_iteration_factors(
                        models.GradientEnsemble.uniform(history), est.steps)
                if exact:
                    cos = metrics.cosine_similarity_kron(K, acc.curvature())
                else:
                    cos = bank.cosine(K)
                rows.append(_row(ev.step, "adagrad", est.name, cos, method, seed))
    return _sort(rows)


# --------------------------------------------------------------------------
# figure 2: spectrum of the rearranged curvature


def run_figure2(cfg):
    """``ratio_opt``, ``ratio_L`` and ``ratio_R`` per probe step and target."""
    ds = build_dataset(cfg)
    model = build_model(cfg, ds)
    tc = build_train_config(cfg)
    layer = model.config.probe_layer
    m, n = model.probe_shape
    seed = cfg["seed"]
    schedule = set(tc.schedule())
    acc = curvature.AdagradAccumulator.zeros(m, n, exact=True)
    rows = []
    for ev in optim.Trainer(model, ds, tc).run():
        acc = curvature.adagrad_update(acc, ev.grads[layer])
        if ev.step not in schedule:
            continue
        for target in cfg["curvature_targets"]:
            if target == "gn":
                H = curvature.assemble(models.gn_ensemble_exact(ev.model, ds, layer), "gn_exact")
            else:
                H = acc.curvature()
            rep = metrics.spectrum_report(H)
            for name in RATIO_NAMES:
                rows.append(_row(ev.step, target, name, getattr(rep, name), "exact", seed))
    return _sort(rows)


# --------------------------------------------------------------------------
# figure 4: batch size and label mode


def checkpoint_model(cfg, ds, model):
    """Model after ``checkpoint_step`` training steps (default: all of them)."""
    tc = build_train_config(cfg)
    stop = tc.steps if cfg["checkpoint_step"] is None else cfg["checkpoint_step"]
    for ev in optim.Trainer(model, ds, tc).run():
        if ev.step == stop:
            return ev.step, ev.model
    raise ConfigError("checkpoint_step: never reached")


def run_figure4(cfg):
    """Cosine against exact ``H_GN`` of estimators built from batch gradients.

    ``covariance`` compares the (scaled) batch-gradient second moment itself.
    """
    if not cfg["batch_sweep"]:
        raise ConfigError("batch_sweep: must not be empty for this run")
    ds = build_dataset(cfg)
    model = build_model(cfg, ds)
    layer = model.config.probe_layer
    step, model = checkpoint_model(cfg, ds, model)
    seed, method = cfg["seed"], cfg["batch_method"]
    H = curvature.assemble(models.gn_ensemble_exact(model, ds, layer), "gn_exact")
    ests = [e for e in _estimators(cfg) if e.kind != "kfac"]
    rows = []
    for B in cfg["batch_sweep"]:
        for mode in cfg["label_modes"]:
            eB = curvature.batch_ensemble(model, ds, B, mode, cfg["batch_trials"], seed, method,
                                          layer)
            HB = curvature.assemble(eB, "batch_cov")
            rows.append(_row(step, "gn", "covariance", metrics.cosine_similarity(HB.H, H.H),
                             method, seed, B, mode))
            for est in ests:
                K = estimate(est, eB, HB, layer=layer)
                rows.append(_row(step, "gn", est.name, metrics.cosine_similarity_kron(K, H),
                                 method, seed, B, mode))
    return _sort(rows)


RUNNERS = {"figure1": run_figure1, "figure2": run_figure2, "figure4": run_figure4}


# --------------------------------------------------------------------------
# output


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in CSV_HEADER])
    return buf.getvalue()


def atomic_write(path, text: str):
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_run(cfg, name, rows, out_dir=None) -> Path:
    out = Path(out_dir or cfg["output_dir"])
    csv_path = out / f"{name}.csv"
    atomic_write(csv_path, rows_to_csv(rows))
    atomic_write(out / "manifest.json", dumps(cfg))
    return csv_path


def run(cfg, name, out_dir=None) -> Path:
    return write_run(cfg, name, RUNNERS[name](cfg), out_dir)
