"""Training, evaluation and hyperparameter search.

Objective per batch: ``mean|E - E_hat| + beta * mean(L_PDE) + gamma * mean(L_net)``
with the two penalties taken per graph.  Adam with a cosine learning-rate
decay (no restarts) and global-norm gradient clipping.

One master seed drives everything: it is split with ``SeedSequence.spawn``
into independent Philox streams for data order, parameter init, training
subsampling and random-matrix ablations.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .batch import PreparedSystem, collate, prepare_system, random_psd_laplacian
from .molgraph import AtomicSystem, write_xyz
from .phi import PhiConfig, PhiModel, phi_forward
from .potential import HostConfig
from .tensor import NonFiniteError, Tape

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingAborted",
    "Adam",
    "total_loss",
    "cosine_lr",
    "clip_gradients",
    "prepare_dataset",
    "fit_energy_normalization",
    "train_run",
    "evaluate",
    "hyper_search",
    "save_checkpoint",
    "load_checkpoint",
    "DATA_FRACTIONS",
    "ABLATIONS",
    "HYPER_GRID",
    "METRIC_COLUMNS",
]

log = logging.getLogger(__name__)

DATA_FRACTIONS = (0.05, 0.25, 0.5, 1.0)
ABLATIONS = ("none", "random-laplacian", "no-residual")
HYPER_GRID = {
    "k": (3, 5, 7, 9, 10, 15),
    "beta": (1e-4, 1e-3, 1e-2, 1e-1, 5e-1),
    "gamma": (1e-4, 1e-3, 1e-2, 1e-1, 5e-1),
}
# wall time is kept in TrainResult.epoch_seconds, not in the CSV, so that
# identical runs write byte-identical files
METRIC_COLUMNS = ("epoch", "train_mae", "val_mae", "l_pde", "l_net", "es_mean",
                  "net_charge", "lr")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phi: PhiConfig | None = field(default_factory=PhiConfig)
    host: HostConfig = field(default_factory=HostConfig)
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    lr_final_ratio: float = 1e-2
    grad_clip: float = 1e3
    seed: int = 0
    data_fraction: float = 1.0
    ablation: str = "none"
    alpha_init: str = "random"
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch_size must be positive")
        if self.data_fraction not in DATA_FRACTIONS:
            raise ValueError(f"data_fraction must be one of {DATA_FRACTIONS}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.ablation != "none" and self.phi is None:
            raise ValueError("ablations need a Phi-Module")
        if self.alpha_init not in ("random", "zero"):
            raise ValueError("alpha_init must be 'random' or 'zero'")

    def streams(self) -> dict[str, np.random.SeedSequence]:
        names = ("shuffle", "init", "subsample", "ablation")
        return dict(zip(names, np.random.SeedSequence(self.seed).spawn(len(names))))

    def init_seed(self) -> int:
        return int(self.streams()["init"].generate_state(1)[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class TrainResult:
    model: PhiModel
    history: list[dict]
    best_epoch: int
    best_val_mae: float
    step_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)


# -- optimizer ----------------------------------------------------------------

class Adam:
    def __init__(self, names, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros(s) for n, s in zip(names, shapes)}
        self.v = {n: np.zeros(s) for n, s in zip(names, shapes)}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p = params[name]
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step: int, total: int, lr: float, final_ratio: float) -> float:
    """Cosine decay from ``lr`` to ``final_ratio * lr`` over ``total`` steps."""
    if total <= 1:
        return lr
    frac = min(step / (total - 1), 1.0)
    low = lr * final_ratio
    return low + 0.5 * (lr - low) * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


def total_loss(e_hat, e_target, l_pde=None, l_net=None, beta: float = 0.0,
               gamma: float = 0.0):
    """Returns ``(loss tensor, components dict)``."""
    e_hat = T.as_tensor(e_hat)
    target = np.asarray(e_target, dtype=np.float64)
    if target.size == 0:
        raise ValueError("empty batch")
    mae = T.mean(T.tabs(e_hat - target))
    loss = mae
    parts = {"mae": float(mae.data)}
    if l_pde is not None:
        m_pde = T.mean(T.as_tensor(l_pde))
        parts["l_pde"] = float(m_pde.data)
        if beta:
            loss = loss + beta * m_pde
    if l_net is not None:
        m_net = T.mean(T.as_tensor(l_net))
        parts["l_net"] = float(m_net.data)
        if gamma:
            loss = loss + gamma * m_net
    parts["loss"] = float(loss.data)
    return loss, parts


# -- data -----------------------------------------------------------------------

def prepare_dataset(systems, model_or_cfg, seed: int = 0, ablation: str = "none",
                    ablation_seed=None) -> list[PreparedSystem]:
    """Graphs, Laplacians and eigenbases for every system (geometry is fixed, so once)."""
    if isinstance(model_or_cfg, PhiModel):
        host, phi = model_or_cfg.host, model_or_cfg.phi
    else:
        host, phi = model_or_cfg.host, model_or_cfg.phi
    k = phi.k if phi is not None else None
    tol = phi.eig_tol if phi is not None else 1e-8
    largest = phi.largest if phi is not None else False
    mats = [None] * len(systems)
    if ablation == "random-laplacian":
        children = (ablation_seed or np.random.SeedSequence(seed)).spawn(len(systems))
        mats = [random_psd_laplacian(s.n_atoms, np.random.Generator(np.random.Philox(c)))
                for s, c in zip(systems, children)]
    return [prepare_system(s, k, host.cutoff, host.max_neighbors, tol=tol, seed=seed,
                           largest=largest, laplacian=m)
            for s, m in zip(systems, mats)]


def fit_energy_normalization(systems) -> tuple[float, float]:
    """Per-atom shift and residual spread used to scale the readout."""
    e = np.array([s.energy for s in systems], dtype=np.float64)
    n = np.array([s.n_atoms for s in systems], dtype=np.float64)
    shift = float(e.sum() / n.sum())
    spread = float(np.std(e - shift * n))
    return (spread if spread > 0 else 1.0), shift


def _batches(n: int, size: int, order=None):
    idx = np.arange(n) if order is None else order
    return [idx[i:i + size] for i in range(0, n, size)]


def _dump_batch(out_dir, items, info):
    if not out_dir:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "nan_dump.xyz")
    write_xyz(path, [it.system for it in items])
    with open(os.path.join(out_dir, "nan_dump.json"), "w") as fh:
        json.dump(info, fh, indent=2, default=str)
    return path


def _forward_loss(items, model, k, beta, gamma):
    batch = collate(items, k)
    out = phi_forward(batch, model)
    loss, parts = total_loss(out.energy, batch.energies, out.l_pde, out.l_net, beta, gamma)
    return loss, parts, out


def evaluate(model: PhiModel, prepared, batch_size: int = 64) -> dict:
    """MAE plus mean residual, net charge and electrostatic energy over a split."""
    if len(prepared) == 0:
        raise ValueError("empty split")
    if isinstance(prepared[0], AtomicSystem):
        prepared = prepare_dataset(prepared, model)
    k = model.phi.k if model.phi is not None else None
    abs_err, pde, net, es, charge = [], [], [], [], []
    for idx in _batches(len(prepared), batch_size):
        items = [prepared[i] for i in idx]
        batch = collate(items, k)
        out = phi_forward(batch, model)
        abs_err.append(np.abs(out.energy.data - batch.energies))
        if out.l_pde is not None:
            pde.append(out.l_pde.data)
            net.append(out.l_net.data)
            es.append(out.e_es.data)
    res = {"mae": float(np.mean(np.concatenate(abs_err))), "n": len(prepared)}
    if pde:
        res["l_pde"] = float(np.mean(np.concatenate(pde)))
        res["net_charge"] = float(np.mean(np.concatenate(net)))
        res["es_mean"] = float(np.mean(np.concatenate(es)))
    else:
        res["l_pde"] = res["net_charge"] = res["es_mean"] = 0.0
    res["l_net"] = res["net_charge"]
    return res


def train_run(cfg: TrainConfig, train, val, out_dir: str | None = None,
              prepared: tuple | None = None, max_steps: int | None = None) -> TrainResult:
    """Train a model; returns it with the best-validation weights restored.

    ``train``/``val`` are lists of labelled systems.  ``prepared`` may pass
    precomputed ``(train_prepared, val_prepared)`` to share eigenbases
    between runs with identical geometry settings.
    """
    streams = cfg.streams()
    if cfg.data_fraction < 1.0:
        rng_sub = np.random.Generator(np.random.Philox(streams["subsample"]))
        n_keep = max(1, int(round(cfg.data_fraction * len(train))))
        keep = np.sort(rng_sub.permutation(len(train))[:n_keep])
    else:
        keep = np.arange(len(train))
    model = PhiModel(cfg.host, cfg.phi, seed=cfg.init_seed(), alpha_init=cfg.alpha_init)

    if prepared is None:
        tr_prep = prepare_dataset(train, model, ablation=cfg.ablation,
                                  ablation_seed=streams["ablation"])
        va_prep = prepare_dataset(val, model, ablation=cfg.ablation,
                                  ablation_seed=np.random.SeedSequence(cfg.seed + 1).spawn(1)[0])
    else:
        tr_prep, va_prep = prepared
    tr_prep = [tr_prep[i] for i in keep]
    scale, shift = fit_energy_normalization([p.system for p in tr_prep])
    model.energy_scale, model.energy_shift = scale, shift

    k = cfg.phi.k if cfg.phi is not None else None
    beta = 0.0 if (cfg.phi is None or cfg.ablation == "no-residual") else cfg.phi.beta
    gamma = 0.0 if cfg.phi is None else cfg.phi.gamma
    names = list(model.params)
    opt = Adam(names, [model.params[n].shape for n in names])
    shuffle = np.random.Generator(np.random.Philox(streams["shuffle"]))
    steps_per_epoch = math.ceil(len(tr_prep) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs

    writer = fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

    history, step_losses, epoch_seconds = [], [], []
    best = (math.inf, -1, model.arrays())
    step = 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = shuffle.permutation(len(tr_prep))
            err_sum = 0.0
            lr = cfg.lr
            for idx in _batches(len(tr_prep), cfg.batch_size, order):
                items = [tr_prep[i] for i in idx]
                lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_final_ratio)
                try:
                    with Tape() as tape:
                        loss, parts, _ = _forward_loss(items, model, k, beta, gamma)
                    if not math.isfinite(parts["loss"]):
                        raise NonFiniteError("non-finite loss")
                    g = tape.backward(loss)
                    grads = {n: g[model.params[n]] for n in names}
                    grads, gnorm = clip_gradients(grads, cfg.grad_clip)
                    if not math.isfinite(gnorm):
                        raise NonFiniteError("non-finite gradient norm")
                except NonFiniteError as exc:
                    info = {"epoch": epoch, "step": step, "error": str(exc),
                            "indices": [int(it.system.info.get("index", -1)) for it in items],
                            "config": cfg.to_dict()}
                    dump = _dump_batch(out_dir, items, info)
                    raise TrainingAborted(f"numerical failure at step {step}: {exc}"
                                          + (f" (batch dumped to {dump})" if dump else "")) from exc
                opt.step(model.params, grads, lr)
                step_losses.append(parts["loss"])
                err_sum += parts["mae"] * len(idx)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            epoch_seconds.append(time.perf_counter() - t0)
            ev = evaluate(model, va_prep, cfg.eval_batch_size) if va_prep else {
                "mae": math.nan, "l_pde": 0.0, "l_net": 0.0, "es_mean": 0.0, "net_charge": 0.0}
            row = {"epoch": epoch + 1, "train_mae": err_sum / len(tr_prep), "val_mae": ev["mae"],
                   "l_pde": ev["l_pde"], "l_net": ev["l_net"], "es_mean": ev["es_mean"],
                   "net_charge": ev["net_charge"], "lr": lr}
            history.append(row)
            if writer:
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                 for c in METRIC_COLUMNS])
                fh.flush()
            if ev["mae"] < best[0] or best[1] < 0:
                best = (ev["mae"], epoch + 1, model.arrays())
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if fh:
            fh.close()
    model.load_arrays(best[2])
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "best.ckpt"), model, cfg)
    return TrainResult(model, history, best[1], best[0], step_losses, epoch_seconds)


# -- checkpoints ----------------------------------------------------------------

_MAGIC = b"PHICKPT\x00"
_VERSION = 1


def save_checkpoint(path, model: PhiModel, cfg: TrainConfig | None = None) -> None:
    """``magic | version u32 | header length u64 | JSON header | float64 blobs``."""
    entries, offset = [], 0
    for name, t in model.params.items():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.data.size
    header = {
        "version": _VERSION,
        "tensors": entries,
        "host": asdict(model.host),
        "phi": None if model.phi is None else asdict(model.phi),
        "seed": model.seed,
        "energy_scale": model.energy_scale,
        "energy_shift": model.energy_shift,
        "config": None if cfg is None else cfg.to_dict(),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(raw)))
        fh.write(raw)
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> PhiModel:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(n))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    phi = None if header["phi"] is None else PhiConfig(**header["phi"])
    model = PhiModel(HostConfig(**header["host"]), phi, seed=header["seed"])
    arrays = {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = blob[e["offset"]: e["offset"] + size].reshape(e["shape"]).copy()
    if set(arrays) != set(model.params):
        raise ValueError(f"{path}: parameter names do not match the configured model")
    model.load_arrays(arrays)
    model.energy_scale = header["energy_scale"]
    model.energy_shift = header["energy_shift"]
    return model


# -- hyperparameter search ------------------------------------------------------

def hyper_search(base: TrainConfig, train, val, budget: int, seed: int = 0,
                 grid: dict | None = None, epochs: int = 20, out_dir: str | None = None):
    """Random uniform sampling over the grid; returns ``(trials, evp)``.

    ``evp`` is the expected best negated validation MAE for ``n = 1..budget``.
    """
    from .oracles import evp_curve

    if budget < 1:
        raise ValueError("budget must be >= 1")
    grid = grid or HYPER_GRID
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    trials = []
    for t in range(budget):
        k = int(rng.choice(grid["k"]))
        beta = float(rng.choice(grid["beta"]))
        gamma = float(rng.choice(grid["gamma"]))
        phi = PhiConfig(**{**asdict(base.phi or PhiConfig()), "k": k, "beta": beta, "gamma": gamma})
        cfg = TrainConfig(**{**_shallow(base), "phi": phi, "epochs": epochs})
        res = train_run(cfg, train, val)
        trials.append({"trial": t, "k": k, "beta": beta, "gamma": gamma,
                       "val_mae": res.best_val_mae})
    scores = np.array([-tr["val_mae"] for tr in trials])
    evp = evp_curve(scores, budget)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "trials.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "k", "beta", "gamma", "val_mae"])
            for tr in trials:
                w.writerow([tr["trial"], tr["k"], repr(tr["beta"]), repr(tr["gamma"]),
                            repr(tr["val_mae"])])
        with open(os.path.join(out_dir, "evp.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "expected_best"])
            for n, v in enumerate(evp, start=1):
                w.writerow([n, repr(float(v))])
    return trials, evp


def _shallow(cfg: TrainConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
