"""Datasets: schema, synthetic generation, persistence and splitting.

On-disk layout of a dataset directory::

    stations.csv    id,c1,c2,coord_system
    scale_<l>.f64   predictor tensor of scale l, dims (N, T, S)
    targets.f64     response tensor, dims (1, T, S)
    meta.json       {"L": ..., "K_true": ..., "noise_sigma": ..., "seed": ...}

Each ``.f64`` file is the 8-byte magic ``SUMTENS1``, three little-endian
uint64 dims, then the row-major little-endian float64 payload.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, DatasetIOError, ParameterError, ShapeError
from .graph import PLANAR, StationSet
from .muscat import MuscatParams
from .tensor import DenseTensor3, DegenerateCPFactors, CPFactors, cp_reconstruct
from .trainer import TaskSet

MAGIC = b"SUMTENS1"
_HEADER = struct.Struct("<8sQQQ")
_COMPONENT = "data"

IID = "iid"
CLUSTERED = "clustered"


@dataclass(eq=False)
class Dataset:
    """``X[l]`` has dims ``(N, T, S)``; ``Y`` has dims ``(1, T, S)``.

    ``truth`` holds generator internals (ground-truth parameters, noiseless
    response) for synthetic data; it is not persisted and not compared.
    """

    X: tuple
    Y: DenseTensor3
    stations: StationSet
    meta: dict = field(default_factory=dict)
    truth: dict | None = None

    def __post_init__(self):
        self.X = tuple(x if isinstance(x, DenseTensor3) else DenseTensor3(x) for x in self.X)
        if not isinstance(self.Y, DenseTensor3):
            self.Y = DenseTensor3(self.Y)
        if not self.X:
            raise ShapeError("dataset needs at least one predictor scale", component=_COMPONENT)
        dims = self.X[0].dims
        if any(x.dims != dims for x in self.X):
            raise ShapeError("all predictor scales must share (N, T, S)", component=_COMPONENT)
        if self.Y.dims != (1, dims[1], dims[2]):
            raise ShapeError(f"targets dims {self.Y.dims} do not match (1, {dims[1]}, {dims[2]})",
                             component=_COMPONENT)
        if len(self.stations) != dims[2]:
            raise ShapeError(f"{len(self.stations)} stations for S={dims[2]}", component=_COMPONENT)
        self.meta = dict(self.meta)
        self.meta.setdefault("L", len(self.X))

    @property
    def N(self):
        return self.X[0].dims[0]

    @property
    def T(self):
        return self.X[0].dims[1]

    @property
    def S(self):
        return self.X[0].dims[2]

    @property
    def L(self):
        return len(self.X)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.X == other.X and self.Y == other.Y and self.stations == other.stations
                and self.meta == other.meta)

    def to_tasks(self) -> TaskSet:
        """Samples as a :class:`TaskSet` with ``x`` of shape ``(S, T, L, N)``."""
        x = np.stack([np.asarray(xl) for xl in self.X])  # (L, N, T, S)
        x = np.ascontiguousarray(x.transpose(3, 2, 0, 1))
        y = np.ascontiguousarray(np.asarray(self.Y)[0].T)
        return TaskSet(self.stations.ids, x, y)

    def time_slice(self, start, stop) -> "Dataset":
        return Dataset(tuple(np.asarray(x)[:, start:stop] for x in self.X), np.asarray(self.Y)[:, start:stop],
                       self.stations, self.meta)

    def select_stations(self, ids) -> "Dataset":
        pos = [self.stations.index(i) for i in ids]
        return Dataset(tuple(np.asarray(x)[:, :, pos] for x in self.X), np.asarray(self.Y)[:, :, pos],
                       self.stations.subset(ids), self.meta)


@dataclass(frozen=True)
class SyntheticConfig:
    S: int = 20
    T: int = 100
    N: int = 4
    L: int = 2
    K_true: int = 2
    noise_sigma: float = 0.0
    hetero_sigma: float = 0.0
    spatial_corr: str = IID
    n_clusters: int = 4
    cluster_spread: float = 2.0
    predictor_noise: float = 0.0
    response_form: str = "muscat"
    seed: int = 0

    def __post_init__(self):
        if min(self.S, self.T, self.N, self.L, self.K_true) < 1:
            raise ParameterError("all synthetic dims must be >= 1", component=_COMPONENT)
        if min(self.noise_sigma, self.hetero_sigma, self.predictor_noise, self.cluster_spread) < 0:
            raise ParameterError("noise levels must be nonnegative", component=_COMPONENT)
        if self.spatial_corr not in (IID, CLUSTERED):
            raise ParameterError(f"unknown spatial_corr {self.spatial_corr!r}", component=_COMPONENT)
        if self.spatial_corr == CLUSTERED and not 1 <= self.n_clusters <= self.S:
            raise ParameterError("n_clusters must be in [1, S]", component=_COMPONENT)
        if self.response_form not in ("muscat", "dense"):
            raise ParameterError(f"unknown response_form {self.response_form!r}", component=_COMPONENT)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown SyntheticConfig keys: {sorted(unknown)}", component=_COMPONENT)
        return cls(**d)


# share of a task's perturbation inherited from its cluster
_CLUSTER_SHARE = 0.8


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a multi-scale dataset whose predictors follow a rank-``K_true`` CP model.

    Responses use the MUSCAT functional form with one shared parameter set
    perturbed per task by ``hetero_sigma`` (``response_form="dense"`` swaps in
    a random dense linear map instead). Under clustered geography, stations
    sit in planar blobs and share most of their factor loadings and
    perturbations with their cluster.
    """
    rng = np.random.default_rng(cfg.seed)
    S, T, N, L, K = cfg.S, cfg.T, cfg.N, cfg.L, cfg.K_true

    if cfg.spatial_corr == CLUSTERED:
        centres = rng.uniform(0.0, 100.0, size=(cfg.n_clusters, 2))
        cluster = np.arange(S) % cfg.n_clusters
        rng.shuffle(cluster)
        coords = centres[cluster] + rng.normal(0.0, cfg.cluster_spread, size=(S, 2))
        A_cl = 1.0 + 0.3 * rng.standard_normal((cfg.n_clusters, K))
        A_true = A_cl[cluster] + 0.05 * rng.standard_normal((S, K))
    else:
        cluster = np.arange(S)
        coords = rng.uniform(0.0, 100.0, size=(S, 2))
        A_true = 1.0 + 0.3 * rng.standard_normal((S, K))

    periods = rng.uniform(10.0, 40.0, size=K)
    phases = rng.uniform(0.0, 2 * np.pi, size=K)
    tt = np.arange(T, dtype=np.float64)[:, None]
    B_true = 1.0 + 0.5 * np.sin(2 * np.pi * tt / periods + phases) + 0.1 * rng.standard_normal((T, K))
    C_base = rng.standard_normal((N, K)) / np.sqrt(K)
    C_true = tuple(C_base + 0.3 * rng.standard_normal((N, K)) / np.sqrt(K) for _ in range(L))
    factors = CPFactors(A_true, B_true, C_true)
    X = []
    for l in range(L):
        xl = np.asarray(cp_reconstruct(factors, l))
        if cfg.predictor_noise > 0:
            xl = xl + cfg.predictor_noise * rng.standard_normal(xl.shape)
        X.append(xl)
    xs = np.stack(X)  # (L, N, T, S)

    def perturbation(shape):
        if cfg.hetero_sigma == 0:
            return np.zeros((S,) + shape)
        indiv = rng.standard_normal((S,) + shape)
        if cfg.spatial_corr != CLUSTERED:
            return cfg.hetero_sigma * indiv
        shared = rng.standard_normal((cfg.n_clusters,) + shape)[cluster]
        return cfg.hetero_sigma * (np.sqrt(_CLUSTER_SHARE) * shared + np.sqrt(1 - _CLUSTER_SHARE) * indiv)

    truth = {"factors": factors, "cluster": cluster}
    if cfg.response_form == "muscat":
        k_true = np.sqrt(rng.dirichlet(np.full(L, 2.0)))
        a = 1.0 + 0.2 * rng.standard_normal(K)
        b = 1.0 + 0.2 * rng.standard_normal(K)
        Wt = rng.standard_normal((L, N, K))
        Vt = rng.standard_normal((L, N, K))
        dW = perturbation((L, N, K))
        dV = perturbation((L, N, K))
        params = []
        Y_clean = np.empty((T, S))
        for s in range(S):
            p = MuscatParams(DegenerateCPFactors(a, b, tuple(C_true)), k_true,
                             tuple(Wt + dW[s]), tuple(Vt + dV[s]))
            params.append(p)
            # effective per-scale coefficient vectors k_l^2 (W_l a + V_l b)
            coef = (k_true ** 2)[:, None] * (np.einsum("lnk,k->ln", np.stack(p.Wspat), a)
                                             + np.einsum("lnk,k->ln", np.stack(p.Vtemp), b))
            Y_clean[:, s] = np.einsum("lnt,ln->t", xs[:, :, :, s], coef)
        truth["task_params"] = params
    else:
        G = rng.standard_normal((L, N)) + perturbation((L, N))
        Y_clean = np.einsum("lnts,sln->ts", xs, G)
        truth["task_coef"] = G

    Y = Y_clean + cfg.noise_sigma * rng.standard_normal((T, S)) if cfg.noise_sigma > 0 else Y_clean.copy()
    truth["Y_clean"] = Y_clean[None].copy()
    ids = tuple(f"st{s:03d}" for s in range(S))
    meta = {"L": L, "K_true": K, "noise_sigma": cfg.noise_sigma, "hetero_sigma": cfg.hetero_sigma,
            "seed": cfg.seed}
    return Dataset(tuple(X), Y[None], StationSet(ids, coords, PLANAR), meta, truth)


def split_train_test(dataset: Dataset, ratio: float = 0.8):
    """Time split: train is ``[0, floor(ratio * T))``, test is the rest."""
    if not 0 < ratio < 1:
        raise ParameterError("ratio must lie strictly between 0 and 1", component=_COMPONENT)
    cut = int(np.floor(ratio * dataset.T))
    if cut == 0 or cut == dataset.T:
        raise ParameterError(f"ratio {ratio} leaves an empty side for T={dataset.T}", component=_COMPONENT)
    return dataset.time_slice(0, cut), dataset.time_slice(cut, dataset.T)


@dataclass(frozen=True)
class CokrigeSchedule:
    groups: tuple
    deletion_order: tuple
    seed: int

    @property
    def G(self):
        return len(self.groups)

    def deleted_ids(self, g):
        """Station ids removed after the first ``g`` deletions."""
        out = []
        for gi in self.deletion_order[:g]:
            out.extend(self.groups[gi])
        return out


def make_cokrige_schedule(stations, G: int, seed: int) -> CokrigeSchedule:
    """Random near-equal partition into ``G`` groups plus a random deletion order."""
    ids = list(stations.ids if isinstance(stations, StationSet) else stations)
    if G < 1:
        raise ParameterError("group count must be positive", component=_COMPONENT)
    if G > len(ids):
        raise ParameterError(f"cannot split {len(ids)} stations into {G} groups", component=_COMPONENT)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    groups = tuple(tuple(ids[i] for i in chunk) for chunk in np.array_split(perm, G))
    order = tuple(int(i) for i in rng.permutation(G))
    return CokrigeSchedule(groups, order, int(seed))


# -- persistence ---------------------------------------------------------------


def write_tensor(path, arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    if arr.ndim != 3:
        raise ShapeError("only rank-3 tensors are stored", component=_COMPONENT)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read {path.name}: {exc.strerror or exc}", component=_COMPONENT) from exc
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path.name}: truncated header", component=_COMPONENT)
    magic, d1, d2, d3 = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path.name}: bad magic {magic!r}", component=_COMPONENT)
    n = d1 * d2 * d3
    if len(raw) - _HEADER.size != 8 * n:
        raise DataFormatError(f"{path.name}: dims ({d1}, {d2}, {d3}) do not match payload of "
                              f"{len(raw) - _HEADER.size} bytes", component=_COMPONENT)
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64).reshape(d1, d2, d3)


def save_dataset(dataset: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "c1", "c2", "coord_system"])
    for sid, (c1, c2) in zip(dataset.stations.ids, dataset.stations.coords):
        w.writerow([sid, repr(float(c1)), repr(float(c2)), dataset.stations.coord_system])
    (d / "stations.csv").write_text(buf.getvalue(), encoding="utf-8")
    for l, x in enumerate(dataset.X):
        write_tensor(d / f"scale_{l}.f64", np.asarray(x))
    write_tensor(d / "targets.f64", np.asarray(dataset.Y))
    (d / "meta.json").write_text(json.dumps(dataset.meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetIOError(f"dataset directory {str(d)!r} does not exist", component=_COMPONENT)
    meta_path = d / "meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetIOError(f"cannot read meta.json: {exc.strerror or exc}", component=_COMPONENT) from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"meta.json: {exc}", component=_COMPONENT) from exc
    stations = _read_stations(d / "stations.csv")
    L = meta.get("L")
    if not isinstance(L, int) or L < 1:
        raise DataFormatError("meta.json: 'L' must be a positive integer", component=_COMPONENT)
    X = tuple(read_tensor(d / f"scale_{l}.f64") for l in range(L))
    Y = read_tensor(d / "targets.f64")
    try:
        return Dataset(X, Y, stations, meta)
    except ShapeError as exc:
        raise DataFormatError(f"inconsistent dataset dims: {exc}", component=_COMPONENT) from exc


def _read_stations(path) -> StationSet:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot read stations.csv: {exc.strerror or exc}", component=_COMPONENT) from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["id", "c1", "c2", "coord_system"]:
        raise DataFormatError("stations.csv: expected header id,c1,c2,coord_system", component=_COMPONENT)
    ids, coords, systems = [], [], set()
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise DataFormatError(f"stations.csv line {i}: expected 4 fields", component=_COMPONENT)
        try:
            coords.append((float(row[1]), float(row[2])))
        except ValueError as exc:
            raise DataFormatError(f"stations.csv line {i}: {exc}", component=_COMPONENT) from exc
        ids.append(row[0])
        systems.add(row[3])
    if len(systems) > 1:
        raise DataFormatError("stations.csv mixes coordinate systems", component=_COMPONENT)
    system = systems.pop() if systems else PLANAR
    try:
        return StationSet(tuple(ids), np.array(coords).reshape(-1, 2), system)
    except (ParameterError, ShapeError) as exc:
        raise DataFormatError(f"stations.csv: {exc}", component=_COMPONENT) from exc


__all__ = [
    "CokrigeSchedule", "Dataset", "SyntheticConfig", "generate_synthetic", "load_dataset",
    "make_cokrige_schedule", "read_tensor", "save_dataset", "split_train_test", "write_tensor",
]
