"""Dataset generation, perturbation, and JSONL serialization.

A sample pairs a measured load vector x = [p_0..p_{N-1}, q_0..q_{N-1}] with
the converged power-flow voltages y = [vmag_0..vmag_{N-1}, vang_0..vang_{N-1}].
Perturbations (Gaussian measurement noise, per-sample bus data loss, random
per-entry loss) touch x only; y always stays the clean solver truth, and the
clean x is stored alongside so every perturbation is invertible for analysis.

File format (JSON lines): the first line is a metadata object
{case, role, steps, seed, perturbation, schema_version}; each following line
is {t, x_clean, x, y} with full-precision floats.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .grid import GridCase, build_ybus
from .powerflow import LoadVector, NonConvergence, solve_pf

SCHEMA_VERSION = 1
ROLE_TRAIN = "train"
ROLE_VAL = "val"
ROLE_TEST = "test"


@dataclass(frozen=True)
class PerturbationConfig:
    """Which test-time corruptions were applied to the measured loads."""

    snr_db: float | None = None
    n_drop_buses: int | None = None
    loss_prob: float | None = None
    load_variation: float = 0.5

    def __post_init__(self):
        if self.loss_prob is not None and not (0.0 <= self.loss_prob <= 1.0):
            raise ValueError(f"loss_prob must be in [0, 1], got {self.loss_prob}")


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: np.ndarray


@dataclass
class Dataset:
    """An ordered time series of (load -> voltage) pairs for one case."""

    case_name: str
    role: str
    x_clean: np.ndarray   # (steps, 2N) measured loads before perturbation
    x: np.ndarray         # (steps, 2N) possibly perturbed loads
    y: np.ndarray         # (steps, 2N) clean converged voltages
    seed: int
    perturbation: PerturbationConfig = PerturbationConfig()
    flags: dict | None = None

    def __len__(self) -> int:
        return self.x.shape[0]

    def sample(self, t: int) -> Sample:
        return Sample(x=self.x[t], y=self.y[t])

    def __iter__(self):
        return (self.sample(t) for t in range(len(self)))

    @property
    def n_bus(self) -> int:
        return self.x.shape[1] // 2


def derived_seed(master_seed: int, index: int) -> int:
    """Stable 64-bit per-dataset seed from (master seed, dataset index)."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def sample_loads(case: GridCase, variation: float, rng: np.random.Generator) -> LoadVector:
    """Draw each load component uniformly from [base(1-v), base(1+v)].

    Zero base loads stay zero (the interval is degenerate). The same
    factor is NOT shared between p and q: each component draws its own.
    """
    if not (0.0 <= variation < 1.0):
        raise ValueError(f"variation must be in [0, 1), got {variation}")
    base_p = case.base_p_load()
    base_q = case.base_q_load()
    factors = rng.uniform(1.0 - variation, 1.0 + variation, size=2 * case.n_bus)
    return LoadVector(p=base_p * factors[: case.n_bus], q=base_q * factors[case.n_bus:])


def generate_dataset(case: GridCase, role: str, steps: int, variation: float,
                     seed: int, tol: float = 1e-8,
                     max_consecutive_rejects: int = 100) -> Dataset:
    """Generate one clean dataset: sample loads, solve, store (x, y) per step.

    Non-convergent draws are rejected and re-sampled; more than
    `max_consecutive_rejects` rejections in a row raise the solver error.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = case.n_bus
    ybus = build_ybus(case)
    rng = np.random.default_rng(seed)
    x = np.empty((steps, 2 * n))
    y = np.empty((steps, 2 * n))
    rejects = 0
    for t in range(steps):
        while True:
            loads = sample_loads(case, variation, rng)
            try:
                sol = solve_pf(case, loads, tol=tol, ybus=ybus)
            except NonConvergence:
                rejects += 1
                if rejects > max_consecutive_rejects:
                    raise
                continue
            rejects = 0
            break
        x[t, :n] = loads.p
        x[t, n:] = loads.q
        y[t, :n] = sol.v_mag
        y[t, n:] = sol.v_ang
    pert = PerturbationConfig(load_variation=variation)
    return Dataset(case_name=case.name, role=role, x_clean=x.copy(), x=x, y=y,
                   seed=seed, perturbation=pert)


def suite_roles(n_train: int = 1, n_val: int = 1, n_test: int = 100) -> list[str]:
    return [ROLE_TRAIN] * n_train + [ROLE_VAL] * n_val + [ROLE_TEST] * n_test


def generate_suite(case: GridCase, master_seed: int, n_train: int = 1, n_val: int = 1,
                   n_test: int = 100, steps: int = 2000, variation: float = 0.5,
                   out_dir: str | None = None, workers: int = 1) -> list:
    """Generate the train/val/test suite (default 1 + 1 + 100 datasets).

    Per-dataset seeds derive deterministically from (master_seed, index), so
    any dataset can be regenerated independently and the whole suite is
    byte-stable under re-runs. With `out_dir` set, each dataset is written as
    ``<role>_<index>.jsonl`` and file paths are returned instead of Dataset
    objects (memory stays bounded); workers > 1 parallelizes across datasets.
    """
    roles = suite_roles(n_train, n_val, n_test)
    jobs = [(case, role, steps, variation, derived_seed(master_seed, i), i, out_dir)
            for i, role in enumerate(roles)]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(workers) as pool:
            return pool.map(_generate_job, jobs)
    return [_generate_job(j) for j in jobs]


def _generate_job(job):
    case, role, steps, variation, seed, index, out_dir = job
    ds = generate_dataset(case, role, steps, variation, seed)
    if out_dir is None:
        return ds
    path = os.path.join(out_dir, f"{role}_{index:03d}.jsonl")
    save_dataset(ds, path)
    return path


def add_gaussian_noise(ds: Dataset, snr_db: float, rng: np.random.Generator) -> Dataset:
    """Add iid zero-mean Gaussian noise with sigma = 10^(-snr_db/20) to every
    x entry. An infinite snr_db disables the perturbation (identity)."""
    if math.isinf(snr_db) and snr_db > 0:
        return ds
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite or +inf, got {snr_db}")
    sigma = 10.0 ** (-snr_db / 20.0)
    x = ds.x + rng.normal(0.0, sigma, size=ds.x.shape)
    pert = PerturbationConfig(snr_db=snr_db, n_drop_buses=ds.perturbation.n_drop_buses,
                              loss_prob=ds.perturbation.loss_prob,
                              load_variation=ds.perturbation.load_variation)
    return Dataset(case_name=ds.case_name, role=ds.role, x_clean=ds.x_clean,
                   x=x, y=ds.y, seed=ds.seed, perturbation=pert)


def drop_bus_data(ds: Dataset, n_drop: int, rng: np.random.Generator) -> Dataset:
    """Per sample, zero both load entries of n_drop distinct uniformly-chosen buses.

    Buses whose entries were already zero before the drop make the dropped
    set unrecoverable from x alone; the count of such collision samples is
    flagged as ``ambiguous_zero_collisions``.
    """
    n = ds.n_bus
    if not (0 <= n_drop <= n):
        raise ValueError(f"n_drop must be in [0, {n}], got {n_drop}")
    x = ds.x.copy()
    collisions = 0
    for t in range(len(ds)):
        buses = rng.choice(n, size=n_drop, replace=False)
        undropped = np.setdiff1d(np.arange(n), buses)
        if np.any((x[t, undropped] == 0.0) & (x[t, undropped + n] == 0.0)):
            collisions += 1
        x[t, buses] = 0.0
        x[t, buses + n] = 0.0
    pert = PerturbationConfig(snr_db=ds.perturbation.snr_db, n_drop_buses=n_drop,
                              loss_prob=ds.perturbation.loss_prob,
                              load_variation=ds.perturbation.load_variation)
    flags = dict(ds.flags or {})
    flags["ambiguous_zero_collisions"] = collisions
    return Dataset(case_name=ds.case_name, role=ds.role, x_clean=ds.x_clean,
                   x=x, y=ds.y, seed=ds.seed, perturbation=pert, flags=flags)


def random_measurement_loss(ds: Dataset, p_l: float, rng: np.random.Generator) -> Dataset:
    """Zero each scalar x entry independently with probability p_l."""
    if not (0.0 <= p_l <= 1.0):
        raise ValueError(f"loss probability must be in [0, 1], got {p_l}")
    mask = rng.random(size=ds.x.shape) < p_l
    x = np.where(mask, 0.0, ds.x)
    pert = PerturbationConfig(snr_db=ds.perturbation.snr_db,
                              n_drop_buses=ds.perturbation.n_drop_buses,
                              loss_prob=p_l, load_variation=ds.perturbation.load_variation)
    return Dataset(case_name=ds.case_name, role=ds.role, x_clean=ds.x_clean,
                   x=x, y=ds.y, seed=ds.seed, perturbation=pert)


def _pert_to_json(pert: PerturbationConfig) -> dict:
    d = asdict(pert)
    if d["snr_db"] is not None and math.isinf(d["snr_db"]):
        d["snr_db"] = "inf"
    return d


def _pert_from_json(d: dict) -> PerturbationConfig:
    snr = d.get("snr_db")
    if snr == "inf":
        snr = math.inf
    return PerturbationConfig(snr_db=snr, n_drop_buses=d.get("n_drop_buses"),
                              loss_prob=d.get("loss_prob"),
                              load_variation=d.get("load_variation", 0.5))


def save_dataset(ds: Dataset, path) -> None:
    meta = {
        "case": ds.case_name,
        "role": ds.role,
        "steps": len(ds),
        "seed": ds.seed,
        "perturbation": _pert_to_json(ds.perturbation),
        "schema_version": SCHEMA_VERSION,
    }
    if ds.flags:
        meta["flags"] = ds.flags
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(meta, separators=(",", ":")) + "\n")
        for t in range(len(ds)):
            row = {"t": t, "x_clean": ds.x_clean[t].tolist(),
                   "x": ds.x[t].tolist(), "y": ds.y[t].tolist()}
            f.write(json.dumps(row, separators=(",", ":")) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as f:
        meta = json.loads(f.readline())
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported dataset schema_version {meta.get('schema_version')}")
        x_clean, x, y = [], [], []
        for line in f:
            row = json.loads(line)
            x_clean.append(row["x_clean"])
            x.append(row["x"])
            y.append(row["y"])
    return Dataset(case_name=meta["case"], role=meta["role"],
                   x_clean=np.array(x_clean), x=np.array(x), y=np.array(y),
                   seed=meta["seed"], perturbation=_pert_from_json(meta["perturbation"]),
                   flags=meta.get("flags"))
