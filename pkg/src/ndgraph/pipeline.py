"""Two-stage training orchestration.

Stage 1 fits the volume encoder and the sequence-wide graph state under
the geometric losses; stage 2 freezes the encoder and fits the pose
projection plus the per-node surface MLPs under the reconstruction
loss. Loss weights ramp by decade on a fixed period, checkpoints are a
self-describing binary format that resumes bitwise, and every run can
append a CSV metrics log.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from dataclasses import dataclass, fields

import numpy as np

from . import defgraph as dg
from . import deformation as df
from . import diffcore as dc
from . import encoder as en
from . import evalkit as ev
from . import implicitsurf as isf
from . import meshing as ms
from . import sdfgrid as sg
from .synthgen import sample_points

CHECKPOINT_MAGIC = b"NDGC"
CHECKPOINT_VERSION = 1

STAGE1_COLUMNS = ("iteration", "coverage", "interior", "affinity", "sparsity",
                  "vc", "sc", "total", "lam_rel", "lam_abs", "lam_sparsity",
                  "lam_sc", "wall_time")
STAGE2_COLUMNS = ("iteration", "recon", "total", "lam_recon", "wall_time")


class PipelineError(ValueError):
    """Raised for invalid training configuration or usage."""


class CheckpointError(PipelineError):
    """Raised for unreadable, malformed, or incompatible checkpoints."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss term or gradient goes non-finite.

    ``details`` carries the iteration, the offending term, and the frame
    it was computed on.
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


@dataclass(frozen=True)
class TrainConfig:
    stage1_iterations: int = 500_000
    stage1_lr: float = 5e-5
    stage1_batch: int = 16
    stage2_iterations: int = 500_000
    stage2_lr: float = 5e-4
    stage2_batch: int = 4
    lam_uniform: float = 1.0
    lam_near: float = 0.1
    lam_interior: float = 1.0
    lam_rel: float = 0.1
    lam_abs: float = 0.1
    lam_sparsity: float = 1e-8
    lam_vc: tuple = (10.0, 1.0, 1e-4)
    lam_sc: float = 1e-6
    lam_recon: float = 1.0
    ramp_period: int = 50_000
    lam_rel_max: float = 10_000.0
    lam_abs_max: float = 1.0
    lam_sparsity_max: float = 1e-3
    lam_sc_max: float = 1000.0
    n_uniform: int = 3000
    n_near: int = 3000
    n_surface: int = 3000
    s2_uniform: int = 1500
    s2_near: int = 1500
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("lam_uniform", "lam_near", "lam_interior", "lam_rel",
                     "lam_abs", "lam_sparsity", "lam_sc", "lam_recon",
                     "lam_rel_max", "lam_abs_max", "lam_sparsity_max",
                     "lam_sc_max"):
            if getattr(self, name) < 0:
                raise PipelineError(f"{name} must be >= 0")
        if any(w < 0 for w in self.lam_vc) or len(self.lam_vc) != 3:
            raise PipelineError("lam_vc must be three weights >= 0")
        if self.stage1_iterations < 0 or self.stage2_iterations < 0:
            raise PipelineError("iteration counts must be >= 0")
        if self.stage1_batch < 1 or self.stage2_batch < 1:
            raise PipelineError("batch sizes must be >= 1")
        if self.ramp_period < 1:
            raise PipelineError("ramp_period must be >= 1")
        if min(self.n_uniform, self.n_near, self.n_surface,
               self.s2_uniform, self.s2_near) < 1:
            raise PipelineError("sample counts must be >= 1")
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise PipelineError("learning rates must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise PipelineError("grad_clip must be positive when set")

    @staticmethod
    def desk(**overrides):
        """Laptop-scale defaults: shorter runs, proportionally shorter ramp."""
        base = dict(stage1_iterations=10_000, stage2_iterations=5_000,
                    ramp_period=1_000, stage1_batch=2, stage2_batch=2)
        base.update(overrides)
        return TrainConfig(**base)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lam_vc"] = list(self.lam_vc)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["lam_vc"] = tuple(d["lam_vc"])
        return TrainConfig(**d)


@dataclass(frozen=True)
class EffectiveWeights:
    uniform: float
    near: float
    interior: float
    rel: float
    absolute: float
    sparsity: float
    vc: tuple
    sc: float
    recon: float


def _ramp(lam0, lam_max, decades):
    """min(lam0 * 10^decades, lam_max), by exact repeated doubling-by-ten."""
    lam = float(lam0)
    for _ in range(min(decades, 400)):
        lam *= 10.0
        if lam >= lam_max:
            return float(lam_max)
    return min(lam, float(lam_max))


def schedule_weights(iteration, config):
    """Effective loss weights at an iteration; four of them ramp x10
    per period up to their caps, the rest stay fixed."""
    if iteration < 0:
        raise PipelineError("iteration must be >= 0")
    k = iteration // config.ramp_period
    return EffectiveWeights(
        uniform=config.lam_uniform,
        near=config.lam_near,
        interior=config.lam_interior,
        rel=_ramp(config.lam_rel, config.lam_rel_max, k),
        absolute=_ramp(config.lam_abs, config.lam_abs_max, k),
        sparsity=_ramp(config.lam_sparsity, config.lam_sparsity_max, k),
        vc=config.lam_vc,
        sc=_ramp(config.lam_sc, config.lam_sc_max, k),
        recon=config.lam_recon,
    )


@dataclass
class TrainState:
    enc_config: en.EncoderConfig
    config: TrainConfig
    encoder: en.EncoderParams
    graph: dg.GraphGlobals
    projection: isf.PoseProjection
    mlps: list
    adam1: dc.AdamState
    adam2: dc.AdamState
    rng: np.random.Generator
    stage1_iteration: int = 0
    stage2_iteration: int = 0


def init_state(enc_config, config):
    """Fresh training state; every component seeded off config.seed."""
    n = enc_config.n_nodes
    return TrainState(
        enc_config=enc_config,
        config=config,
        encoder=en.EncoderParams.init(enc_config, seed=config.seed),
        graph=dg.init_graph_globals(n, seed=config.seed + 1),
        projection=isf.PoseProjection.init(n, seed=config.seed + 2),
        mlps=isf.init_node_mlps(n, seed=config.seed + 3),
        adam1=dc.AdamState(config.stage1_lr),
        adam2=dc.AdamState(config.stage2_lr),
        rng=np.random.default_rng(config.seed),
    )


def _stage1_params(state):
    return {**state.encoder.parameters(), **state.graph.parameters()}


def _stage2_params(state):
    params = dict(state.projection.parameters())
    for mlp in state.mlps:
        params.update(mlp.parameters())
    return params


class _MetricsWriter:
    """Appends CSV rows; floats via repr so logs compare bitwise."""

    def __init__(self, path, columns):
        self.columns = columns
        self.fh = None
        self.rows = []
        if path is not None:
            fresh = not os.path.exists(path) or os.path.getsize(path) == 0
            self.fh = open(path, "a")
            if fresh:
                self.fh.write(",".join(columns) + "\n")

    def row(self, values):
        rec = dict(zip(self.columns, values))
        self.rows.append(rec)
        if self.fh is not None:
            cells = [str(v) if isinstance(v, int) else repr(float(v))
                     for v in values]
            self.fh.write(",".join(cells) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None


def read_metrics(path):
    """Metrics CSV -> list of dicts (floats, iteration as int)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    cols = lines[0].split(",")
    out = []
    for ln in lines[1:]:
        vals = ln.split(",")
        rec = {c: (int(v) if c == "iteration" else float(v))
               for c, v in zip(cols, vals)}
        out.append(rec)
    return out


def _check_finite(term, value, iteration, frame):
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"iteration {iteration}: non-finite {term} loss {value!r} "
            f"on frame {frame}",
            details={"iteration": iteration, "term": term, "frame": frame,
                     "value": float(value)})


def _mean(tensors):
    acc = tensors[0]
    for t in tensors[1:]:
        acc = dc.add(acc, t)
    if len(tensors) > 1:
        acc = dc.mul(acc, dc.constant(1.0 / len(tensors)))
    return acc


def _volume_center(volume):
    return (volume.origin + volume.max_corner()) / 2.0


def train_stage1(sequence, state, iterations=None, metrics_path=None):
    """Fit encoder + graph globals; mutates and returns ``state``.

    Runs until config.stage1_iterations by default; ``iterations`` runs
    exactly that many additional steps instead (for resume tests).
    """
    config = state.config
    target = (config.stage1_iterations if iterations is None
              else state.stage1_iteration + iterations)
    params = _stage1_params(state)
    volumes = sequence.volumes
    n_frames = len(volumes)
    centers = [_volume_center(v) for v in volumes]
    batch = config.stage1_batch
    writer = _MetricsWriter(metrics_path, STAGE1_COLUMNS)
    try:
        while state.stage1_iteration < target:
            i = state.stage1_iteration
            t0 = time.perf_counter()
            lams = schedule_weights(i, config)
            frames = state.rng.integers(0, n_frames, size=batch)
            angles = state.rng.uniform(0.0, 2.0 * np.pi, size=(batch, 2))
            seeds = state.rng.integers(0, 2 ** 63 - 1, size=batch)
            if batch >= 2:
                pair = state.rng.choice(batch, size=2, replace=False)
            else:
                pair = (0, 0)

            vols = []
            for b in range(batch):
                v = volumes[frames[b]]
                vols += [v, sg.resample_rotated(v, angles[b, 0]),
                         sg.resample_rotated(v, angles[b, 1])]
            emb = en.forward_batch(en.volume_tensor(vols), state.encoder,
                                   training=True)
            radii = state.graph.radii()
            aff = state.graph.affinity()

            slot_frames, slot_samples = [], []
            covs, ints, affs, vcs = [], [], [], []
            for b in range(batch):
                f = int(frames[b])
                rows = [en.graph_frame_from_embedding(
                    dc.narrow(emb, 0, 3 * b + j, 1)) for j in range(3)]
                frame, frame_a, frame_b = rows
                samples = sample_points(sequence, f, config.n_uniform,
                                        config.n_near, config.n_surface,
                                        seed=int(seeds[b]))
                covs.append(dg.loss_coverage(samples, frame, radii,
                                             dg.CoverageParams(),
                                             lams.uniform, lams.near))
                ints.append(dg.loss_interior(frame, volumes[f]))
                affs.append(dg.loss_affinity(aff, state.graph.node_distances,
                                             frame, lams.rel, lams.absolute))
                vcs.append(df.vc_from_frames(frame_a, angles[b, 0], frame_b,
                                             angles[b, 1], centers[f],
                                             lams.vc))
                slot_frames.append(frame)
                slot_samples.append(samples)
                for term, tensor in (("coverage", covs[-1]),
                                     ("interior", ints[-1]),
                                     ("affinity", affs[-1]),
                                     ("vc", vcs[-1])):
                    _check_finite(term, tensor.item(), i, f)

            spars = dg.loss_sparsity(state.graph.affinity_params)
            a, b = int(pair[0]), int(pair[1])
            sc = df.loss_surface_consistency(
                slot_samples[a].p_surface, slot_frames[a], slot_frames[b],
                radii, volumes[frames[b]])
            _check_finite("sparsity", spars.item(), i, None)
            _check_finite("sc", sc.item(), i, int(frames[a]))

            cov_m, int_m, aff_m, vc_m = (_mean(ts) for ts in
                                         (covs, ints, affs, vcs))
            total = dc.add(cov_m, dc.mul(int_m, dc.constant(lams.interior)))
            total = dc.add(total, aff_m)
            total = dc.add(total, dc.mul(spars, dc.constant(lams.sparsity)))
            total = dc.add(total, vc_m)
            total = dc.add(total, dc.mul(sc, dc.constant(lams.sc)))
            _check_finite("total", total.item(), i, None)

            grads = dc.gradients(total, params)
            if config.grad_clip is not None:
                grads, _ = dc.clip_gradient_norm(grads, config.grad_clip)
            try:
                dc.adam_step(params, grads, state.adam1)
            except dc.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"iteration {i}: non-finite gradient for '{exc}'",
                    details={"iteration": i, "term": f"gradient/{exc}",
                             "frame": None}) from exc
            state.stage1_iteration += 1
            writer.row((i, cov_m.item(), int_m.item(), aff_m.item(),
                        spars.item(), vc_m.item(), sc.item(), total.item(),
                        lams.rel, lams.absolute, lams.sparsity, lams.sc,
                        time.perf_counter() - t0))
    finally:
        writer.close()
    return state, writer.rows


def _frozen_frames(sequence, state):
    """Eval-mode embeddings for every frame, detached into constants.

    Returns (frames, embeddings) lists; stage 2 and reconstruction read
    the encoder through this single deterministic pass.
    """
    emb = en.forward_batch(en.volume_tensor(sequence.volumes), state.encoder,
                           training=False)
    frames, rows = [], []
    for t in range(len(sequence.volumes)):
        row = dc.constant(emb.data[t].copy())
        rows.append(row)
        frames.append(en.graph_frame_from_embedding(row))
    return frames, rows


def train_stage2(sequence, state, iterations=None, metrics_path=None):
    """Fit pose projection + node MLPs; the encoder stays bitwise frozen."""
    config = state.config
    target = (config.stage2_iterations if iterations is None
              else state.stage2_iteration + iterations)
    params = _stage2_params(state)
    frames_c, emb_c = _frozen_frames(sequence, state)
    radii = dc.constant(state.graph.radii().data.copy())
    tr = sequence.truncation
    n_frames = len(sequence.volumes)
    batch = config.stage2_batch
    writer = _MetricsWriter(metrics_path, STAGE2_COLUMNS)
    try:
        while state.stage2_iteration < target:
            i = state.stage2_iteration
            t0 = time.perf_counter()
            lams = schedule_weights(i, config)
            picks = state.rng.integers(0, n_frames, size=batch)
            seeds = state.rng.integers(0, 2 ** 63 - 1, size=batch)
            groups = {}
            for b in range(batch):
                groups.setdefault(int(picks[b]), []).append(b)
            total = None
            for f, slots in groups.items():
                pts, labels = [], []
                for b in slots:
                    s = sample_points(sequence, f, config.s2_uniform,
                                      config.s2_near, 1, seed=int(seeds[b]))
                    pts += [s.p_uniform, s.p_near]
                    labels += [s.sdf_uniform, s.sdf_near]
                pred, _ = isf.global_sdf(
                    np.concatenate(pts), frames_c[f], radii, state.projection,
                    state.mlps, emb_c[f], truncation=tr)
                term = isf.loss_recon(pred, np.concatenate(labels), tr)
                _check_finite("recon", term.item(), i, f)
                total = term if total is None else dc.add(total, term)
            recon = dc.mul(total, dc.constant(1.0 / batch))
            total = dc.mul(recon, dc.constant(lams.recon))
            _check_finite("total", total.item(), i, None)

            grads = dc.gradients(total, params)
            if config.grad_clip is not None:
                grads, _ = dc.clip_gradient_norm(grads, config.grad_clip)
            try:
                dc.adam_step(params, grads, state.adam2)
            except dc.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"iteration {i}: non-finite gradient for '{exc}'",
                    details={"iteration": i, "term": f"gradient/{exc}",
                             "frame": None}) from exc
            state.stage2_iteration += 1
            writer.row((i, recon.item(), total.item(), lams.recon,
                        time.perf_counter() - t0))
    finally:
        writer.close()
    return state, writer.rows


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _encoder_config_dict(cfg):
    return {"resolution": cfg.resolution, "channels": list(cfg.channels),
            "n_nodes": cfg.n_nodes, "head_width": cfg.head_width,
            "residual_units": cfg.residual_units,
            "leaky_slope": cfg.leaky_slope, "bn_momentum": cfg.bn_momentum}


def config_fingerprint(enc_config, config):
    blob = json.dumps({"encoder": _encoder_config_dict(enc_config),
                       "train": config.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _adam_header(adam):
    return {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "t": adam.t}


def _adam_arrays(adam):
    arrays = []
    for name, m in adam.m.items():
        arrays.append((f"m.{name}", m))
    for name, v in adam.v.items():
        arrays.append((f"v.{name}", v))
    return arrays


_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.float32, 1: np.float64}


def _write_array(fh, name, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"array '{name}' has unsupported dtype {arr.dtype}")
    raw = name.encode()
    fh.write(struct.pack("<I", len(raw)) + raw)
    fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def save_checkpoint(state, path):
    rng_state = state.rng.bit_generator.state
    header = {
        "version": CHECKPOINT_VERSION,
        "precision": dc.precision(),
        "encoder_config": _encoder_config_dict(state.enc_config),
        "train_config": state.config.to_dict(),
        "config_hash": config_fingerprint(state.enc_config, state.config),
        "seed": state.config.seed,
        "stage1_iteration": state.stage1_iteration,
        "stage2_iteration": state.stage2_iteration,
        "adam1": _adam_header(state.adam1),
        "adam2": _adam_header(state.adam2),
        "rng": {"state": str(rng_state["state"]["state"]),
                "inc": str(rng_state["state"]["inc"]),
                "has_uint32": rng_state["has_uint32"],
                "uinteger": rng_state["uinteger"]},
    }
    sections = [
        ("ENCODER", [(n, t.data) for n, t in state.encoder.params.items()]),
        ("ENCODER_BUFFERS", list(state.encoder.buffers.items())),
        ("GRAPH_GLOBALS",
         [(n, t.data) for n, t in state.graph.parameters().items()]),
        ("POSE_PROJ", [("pose_proj.w", state.projection.weight.data)]),
    ]
    for i, mlp in enumerate(state.mlps):
        sections.append((f"NODE_MLP_{i:03d}",
                         [(n, t.data) for n, t in mlp.parameters().items()]))
    sections.append(("ADAM_STAGE1", _adam_arrays(state.adam1)))
    sections.append(("ADAM_STAGE2", _adam_arrays(state.adam2)))

    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name, arrays in sections:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", len(arrays)))
            for arr_name, arr in arrays:
                _write_array(fh, arr_name, arr)


class _Reader:
    def __init__(self, raw, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode()

    def array(self):
        arr_name = self.name()
        code, ndim = self.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{self.path}: bad dtype code {code}")
        shape = self.unpack(f"<{ndim}I")
        dtype = np.dtype(_CODE_DTYPES[code]).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype)
        return arr_name, data.reshape(shape).astype(_CODE_DTYPES[code])

    @property
    def done(self):
        return self.off == len(self.raw)


def _read_sections(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    r = _Reader(raw, path)
    r.take(4)
    version, header_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(r.take(header_len).decode())
    sections = {}
    while not r.done:
        name = r.name()
        (count,) = r.unpack("<I")
        sections[name] = dict(r.array() for _ in range(count))
    return header, sections


def checkpoint_info(path):
    """Header dict plus {section: {array: shape}} for inspection."""
    header, sections = _read_sections(path)
    shapes = {name: {k: tuple(v.shape) for k, v in arrays.items()}
              for name, arrays in sections.items()}
    return header, shapes


def _require(sections, name, path):
    if name not in sections:
        raise CheckpointError(f"{path}: missing checkpoint section {name}")
    return sections[name]


def _load_adam(header, arrays):
    adam = dc.AdamState(header["lr"], header["beta1"], header["beta2"],
                        header["eps"])
    adam.t = header["t"]
    for name, arr in arrays.items():
        kind, param = name.split(".", 1)
        getattr(adam, kind)[param] = arr.copy()
    return adam


def load_checkpoint(path, expect_hash=None):
    header, sections = _read_sections(path)
    if header["precision"] != dc.precision():
        raise CheckpointError(
            f"{path}: checkpoint precision {header['precision']} "
            f"incompatible with active precision {dc.precision()}")
    if expect_hash is not None and header["config_hash"] != expect_hash:
        raise CheckpointError(f"{path}: config hash mismatch")
    enc_config = en.EncoderConfig(
        **{**header["encoder_config"],
           "channels": tuple(header["encoder_config"]["channels"])})
    config = TrainConfig.from_dict(header["train_config"])
    n = enc_config.n_nodes

    enc_arrays = _require(sections, "ENCODER", path)
    params = {name: dc.parameter(arr.copy(), name=name)
              for name, arr in enc_arrays.items()}
    buffers = {name: arr.copy()
               for name, arr in _require(sections, "ENCODER_BUFFERS",
                                         path).items()}
    encoder = en.EncoderParams(enc_config, params, buffers)

    gg = _require(sections, "GRAPH_GLOBALS", path)
    aff_names = sorted((k for k in gg if k.startswith("affinity_")),
                       key=lambda k: int(k.split("_")[1]))
    graph = dg.GraphGlobals(
        dc.parameter(gg["log_radii"].copy(), name="log_radii"),
        [dc.parameter(gg[k].copy(), name=k) for k in aff_names],
        dc.parameter(gg["node_distances"].copy(), name="node_distances"))

    pw = _require(sections, "POSE_PROJ", path)["pose_proj.w"]
    projection = isf.PoseProjection(
        n, dc.parameter(pw.copy(), name="pose_proj.w"),
        code_dim=pw.shape[0] // n)

    mlps = []
    for i in range(n):
        arrays = _require(sections, f"NODE_MLP_{i:03d}", path)
        mlps.append(isf.NodeMlpParams(
            f"node{i:03d}",
            {k: dc.parameter(v.copy(), name=k) for k, v in arrays.items()}))

    adam1 = _load_adam(header["adam1"],
                       _require(sections, "ADAM_STAGE1", path))
    adam2 = _load_adam(header["adam2"],
                       _require(sections, "ADAM_STAGE2", path))

    rng = np.random.default_rng(header["seed"])
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(header["rng"]["state"]),
                  "inc": int(header["rng"]["inc"])},
        "has_uint32": header["rng"]["has_uint32"],
        "uinteger": header["rng"]["uinteger"],
    }
    return TrainState(enc_config=enc_config, config=config, encoder=encoder,
                      graph=graph, projection=projection, mlps=mlps,
                      adam1=adam1, adam2=adam2, rng=rng,
                      stage1_iteration=header["stage1_iteration"],
                      stage2_iteration=header["stage2_iteration"])


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

@dataclass
class FrameReconstruction:
    mesh: ms.TriangleMesh
    colored_mesh: ms.TriangleMesh
    graph: dg.GraphFrame
    values: np.ndarray


def implicit_lattice(volume, frame, radii, projection, mlps, embedding,
                     truncation, chunk=4096):
    """Sample the blended implicit surface on the volume's lattice."""
    res = volume.resolution
    idx = np.indices(res).reshape(3, -1).T
    pts = volume.origin + idx * volume.voxel_size
    vals = np.empty(pts.shape[0], dtype=dc.float_dtype())
    for start in range(0, pts.shape[0], chunk):
        part = pts[start:start + chunk].astype(dc.float_dtype())
        out, _ = isf.global_sdf(part, frame, radii, projection, mlps,
                                embedding, truncation=truncation)
        vals[start:start + chunk] = out.data
    return vals.reshape(res)


def _warp_points(points, source, target, radii):
    """Warp raw coordinates; unsupported points pass through unchanged."""
    out, supported = df.warp(dc.constant(points.astype(dc.float_dtype())),
                             source, target, radii, _require_support=False)
    warped = np.where(supported[:, None], out.data, points)
    return warped, supported


def make_warp(sequence, state):
    """warp_fn(k, t, points) between any two frames, for evaluation."""
    frames_c, _ = _frozen_frames(sequence, state)
    radii = dc.constant(state.graph.radii().data.copy())

    def warp_fn(k, t, points):
        warped, _ = _warp_points(np.asarray(points, dtype=np.float64),
                                 frames_c[k], frames_c[t], radii)
        return warped

    return warp_fn


def reconstruct(sequence, state, frames=None):
    """Extract per-frame meshes plus correspondence-colored copies.

    Colors come from warping each frame's vertices back to frame 0 and
    reading the normalized position in frame 0's bounding box.
    """
    frames_c, emb_c = _frozen_frames(sequence, state)
    radii = dc.constant(state.graph.radii().data.copy())
    first = sequence.volumes[0]
    lo, hi = first.origin, first.max_corner()
    which = range(len(sequence.volumes)) if frames is None else frames
    out = []
    for t in which:
        volume = sequence.volumes[t]
        values = implicit_lattice(volume, frames_c[t], radii,
                                  state.projection, state.mlps, emb_c[t],
                                  sequence.truncation)
        mesh = ms.marching_cubes(values.astype(np.float64), 0.0,
                                 origin=volume.origin,
                                 voxel_size=volume.voxel_size)
        colored = ev.correspondence_colors(
            mesh, lo, hi,
            lambda pts, t=t: _warp_points(pts, frames_c[t], frames_c[0],
                                          radii))
        out.append(FrameReconstruction(mesh, colored, frames_c[t], values))
    return out
