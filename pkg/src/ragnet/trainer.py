"""Two-phase optimization, Adam updates, checkpoints, and training logs.

Phase 1 pretrains the reflection estimator alone on its own reconstruction
and perceptual terms; phase 2 trains both stages jointly on the full
five-term objective, alternating one critic step with one generator step
when the adversarial term is enabled.  Everything is a pure function of
(config, dataset, seed): shuffles derive per-epoch seeds, parameters train
in float32, and checkpoints round-trip bit-exactly, so an interrupted run
resumed from an epoch checkpoint finishes byte-identical to an
uninterrupted one.

Checkpoint file layout (little-endian): magic ``RAGN``, version u32,
tensor count u32; per tensor: name length u32, UTF-8 name, rank u32,
dims u32 x rank, float32 payload; trailing CRC32 of all preceding bytes.
The training log is a CSV with header ``iter,phase,rec,percep,excl,adv,mask,total``.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

import ragnet.tensor as T
from ragnet import losses as L
from ragnet.model import ModelConfig, Network, RAG_VARIANTS, build_network, forward_gr, forward_gt
from ragnet.synthesis import derive_seed, load_triple, read_manifest

CKPT_MAGIC = b"RAGN"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, last_checkpoint: str | None):
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint
        where = f"; last good checkpoint: {last_checkpoint}" if last_checkpoint else ""
        super().__init__(f"non-finite loss at iteration {iteration}{where}")


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """First/second moment buffers and step counter for one parameter set."""

    def __init__(self, params: dict[str, T.Parameter], cfg: AdamConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict[str, T.Parameter]) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in params.items():
            if p.grad is None:
                raise ValueError(f"adam_step: parameter {name!r} has no gradient "
                                 "(run backward before stepping)")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def adam_step(params: dict[str, T.Parameter], state: AdamState) -> None:
    state.step(params)


def clip_grad_norm(params: dict[str, T.Parameter], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Deep ReLU stacks under a fixed learning rate are vulnerable to loss
    spikes (for example the unbounded derivative of the exclusion term's
    outer square root near flat predictions) that shock the optimizer into
    saturation; capping the joint norm bounds one step's damage without
    altering steady-state directions.
    """
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


@dataclass
class Schedule:
    """Desk-scale defaults; the published protocol is 50 + 100 epochs at full width."""
    phase1_epochs: int = 2
    phase2_epochs: int = 8
    batch_size: int = 4

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    thresholds: L.MaskLossThresholds = field(default_factory=L.MaskLossThresholds)
    adam: AdamConfig = field(default_factory=AdamConfig)
    rec_normalize: bool = True     # per-element mean keeps term scales comparable at desk size
    mask_normalize: bool = True
    stop_gradient_r: bool = False  # ablation: block the joint gradient through R_hat
    clip_grad_norm: float = 1.0    # per-network global-norm cap; <= 0 disables
    checkpoint_every_epoch: bool = True


# ---------------------------------------------------------------------------
# checkpoint serialization

def save_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    """Write named float32 tensors in the binary RAGN format (sorted by name)."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        enc = name.encode()
        chunks.append(struct.pack("<I", len(enc)))
        chunks.append(enc)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Parse and validate a RAGN checkpoint; raises with offset diagnostics."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise ValueError(f"checkpoint {path}: file too short ({len(blob)} bytes)")
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic {blob[:4]!r} at offset 0, expected {CKPT_MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {version}, expected {CKPT_VERSION}")
    body, crc_stored = blob[:-4], struct.unpack_from("<I", blob, len(blob) - 4)[0]
    crc = zlib.crc32(body) & 0xFFFFFFFF
    if crc != crc_stored:
        raise ValueError(f"checkpoint {path}: CRC mismatch (stored {crc_stored:#010x}, computed {crc:#010x})")
    out: dict[str, np.ndarray] = {}
    off = 12
    for i in range(count):
        def need(nbytes, what):
            if off + nbytes > len(body):
                raise ValueError(f"checkpoint {path}: truncated at offset {off}: "
                                 f"expected {nbytes} bytes for {what}, only {len(body) - off} left")
        need(4, f"tensor {i} name length")
        (nlen,) = struct.unpack_from("<I", body, off)
        off += 4
        need(nlen, f"tensor {i} name")
        name = body[off:off + nlen].decode()
        off += nlen
        need(4, f"{name} rank")
        (rank,) = struct.unpack_from("<I", body, off)
        off += 4
        need(4 * rank, f"{name} dims")
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(dims)) if rank else 4
        need(nbytes, f"{name} payload")
        out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).copy()
        off += nbytes
    if off != len(body):
        raise ValueError(f"checkpoint {path}: {len(body) - off} trailing bytes after last tensor")
    return out


def _int_to_limbs(v: int) -> np.ndarray:
    u = v & 0xFFFFFFFFFFFFFFFF
    return np.array([(u >> s) & 0xFFFF for s in (0, 16, 32, 48)], dtype=np.float32)


def _limbs_to_int(a: np.ndarray) -> int:
    limbs = [int(round(float(x))) for x in a.reshape(-1)]
    return limbs[0] | (limbs[1] << 16) | (limbs[2] << 32) | (limbs[3] << 48)


# ---------------------------------------------------------------------------
# trainer state

class TrainerState:
    """Networks, optimizer states, and schedule position of one training run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.nets: dict[str, Network] = {
            "g_r": build_network("g_r", config.model),
            "g_t": build_network("g_t", config.model),
        }
        if config.model.use_adversarial:
            self.nets["disc"] = build_network("discriminator", config.model)
        self.extractor = L.PerceptualExtractor(config.model)
        self.adam: dict[str, AdamState] = {
            name: AdamState(net.params, config.adam) for name, net in self.nets.items()
        }
        self.phase1_done = 0
        self.phase2_done = 0
        self.global_iter = 0

    def trainable(self, name: str) -> dict[str, T.Parameter]:
        return self.nets[name].params

    def zero_grads(self) -> None:
        for net in self.nets.values():
            net.zero_grad()

    def to_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for net_name, net in self.nets.items():
            for pname, p in net.params.items():
                out[f"model/{net_name}/{pname}"] = p.data
        for pname, p in self.extractor.net.params.items():
            out[f"model/percep/{pname}"] = p.data
        for net_name, st in self.adam.items():
            for pname in st.m:
                out[f"adam/{net_name}/{pname}/m"] = st.m[pname]
                out[f"adam/{net_name}/{pname}/v"] = st.v[pname]
            out[f"adam/{net_name}/step"] = _int_to_limbs(st.step_count)
        out["meta/phase1_done"] = _int_to_limbs(self.phase1_done)
        out["meta/phase2_done"] = _int_to_limbs(self.phase2_done)
        out["meta/global_iter"] = _int_to_limbs(self.global_iter)
        out["meta/seed"] = _int_to_limbs(self.config.model.seed)
        out["meta/width_multiplier"] = np.array([self.config.model.width_multiplier], dtype=np.float32)
        out["meta/variant"] = np.array([RAG_VARIANTS.index(self.config.model.rag_variant)], dtype=np.float32)
        out["meta/use_adversarial"] = np.array([float(self.config.model.use_adversarial)], dtype=np.float32)
        return out

    def save(self, path) -> None:
        save_checkpoint(self.to_tensors(), path)

    def load(self, path) -> None:
        loaded = load_checkpoint(path)
        expected = self.to_tensors()
        missing = sorted(set(expected) - set(loaded))
        if missing:
            raise ValueError(f"checkpoint {path}: missing tensors {missing[:5]} "
                             f"({len(missing)} total); wrong config?")
        for name, arr in expected.items():
            got = loaded[name]
            if got.shape != arr.shape:
                raise ValueError(f"checkpoint {path}: tensor {name} has shape {got.shape}, "
                                 f"expected {arr.shape}")
        for net_name, net in self.nets.items():
            for pname, p in net.params.items():
                p.data[...] = loaded[f"model/{net_name}/{pname}"]
        for pname, p in self.extractor.net.params.items():
            p.data[...] = loaded[f"model/percep/{pname}"]
        for net_name, st in self.adam.items():
            for pname in st.m:
                st.m[pname][...] = loaded[f"adam/{net_name}/{pname}/m"]
                st.v[pname][...] = loaded[f"adam/{net_name}/{pname}/v"]
            st.step_count = _limbs_to_int(loaded[f"adam/{net_name}/step"])
        self.phase1_done = _limbs_to_int(loaded["meta/phase1_done"])
        self.phase2_done = _limbs_to_int(loaded["meta/phase2_done"])
        self.global_iter = _limbs_to_int(loaded["meta/global_iter"])


def model_config_from_checkpoint(path, seed_fallback: int = 0) -> ModelConfig:
    """Rebuild the architecture hyperparameters stored in a checkpoint."""
    loaded = load_checkpoint(path)
    try:
        width = float(loaded["meta/width_multiplier"][0])
        variant = RAG_VARIANTS[int(loaded["meta/variant"][0])]
        use_adv = bool(loaded["meta/use_adversarial"][0])
        seed = _limbs_to_int(loaded["meta/seed"])
    except KeyError as e:
        raise ValueError(f"checkpoint {path}: missing metadata tensor {e}") from e
    return ModelConfig(width_multiplier=width, rag_variant=variant,
                       use_adversarial=use_adv, seed=seed or seed_fallback)


# ---------------------------------------------------------------------------
# training loop

def _stack(triples, attr) -> T.Tensor:
    return T.Tensor(np.concatenate([getattr(tr, attr) for tr in triples], axis=0))


def _batches(pool: list[int], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(pool))
    for start in range(0, len(pool), batch_size):
        yield [pool[i] for i in order[start:start + batch_size]]


def train(config: TrainConfig, manifest_path, out_dir, resume_from=None) -> tuple[str, str]:
    """Run (or resume) the two-phase protocol; returns (final checkpoint, log csv)."""
    entries = read_manifest(manifest_path)
    triples = [load_triple(e) for e in entries]
    has_r_pool = [i for i, tr in enumerate(triples) if tr.has_reflection_gt]
    no_r_pool = [i for i, tr in enumerate(triples) if not tr.has_reflection_gt]

    os.makedirs(out_dir, exist_ok=True)
    state = TrainerState(config)
    if resume_from is not None:
        state.load(resume_from)
    log_path = os.path.join(out_dir, "train_log.csv")
    log_f = open(log_path, "a" if resume_from is not None else "w")
    if resume_from is None:
        log_f.write("iter,phase,rec,percep,excl,adv,mask,total\n")

    seed = config.model.seed
    last_ckpt: str | None = None

    def write_row(phase, parts: dict[str, float], total: float):
        log_f.write(f"{state.global_iter},{phase},{parts.get('rec', 0.0):.6g},"
                    f"{parts.get('percep', 0.0):.6g},{parts.get('excl', 0.0):.6g},"
                    f"{parts.get('adv', 0.0):.6g},{parts.get('mask', 0.0):.6g},{total:.6g}\n")

    def checkpoint(tag):
        nonlocal last_ckpt
        path = os.path.join(out_dir, f"ckpt_{tag}.bin")
        state.save(path)
        last_ckpt = path
        return path

    def guard_finite(value: float):
        if not np.isfinite(value):
            log_f.close()
            raise TrainingDiverged(state.global_iter, last_ckpt)

    try:
        for epoch in range(state.phase1_done, config.schedule.phase1_epochs):
            rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "order", 1, epoch)))
            for batch in _batches(has_r_pool, config.schedule.batch_size, rng):
                chosen = [triples[i] for i in batch]
                state.global_iter += 1
                total = _phase1_step(state, chosen, write_row)
                guard_finite(total)
            state.phase1_done = epoch + 1
            if config.checkpoint_every_epoch:
                checkpoint(f"p1_e{epoch + 1:03d}")

        for epoch in range(state.phase2_done, config.schedule.phase2_epochs):
            rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "order", 2, epoch)))
            groups = [(has_r_pool, True)] + ([(no_r_pool, False)] if no_r_pool else [])
            for pool, has_r in groups:
                for batch in _batches(pool, config.schedule.batch_size, rng):
                    chosen = [triples[i] for i in batch]
                    state.global_iter += 1
                    total = _phase2_step(state, chosen, has_r, write_row)
                    guard_finite(total)
            state.phase2_done = epoch + 1
            if config.checkpoint_every_epoch:
                checkpoint(f"p2_e{epoch + 1:03d}")
    finally:
        if not log_f.closed:
            log_f.close()

    final = os.path.join(out_dir, "final.bin")
    state.save(final)
    return final, log_path


def _phase1_step(state: TrainerState, batch, write_row) -> float:
    cfg = state.config
    state.zero_grads()
    i_obs = _stack(batch, "i")
    r_gt = _stack(batch, "r")
    with T.Tape():
        r_hat = forward_gr(state.nets["g_r"], i_obs)
        rec = L.rec_loss(r_hat, r_gt, normalize=cfg.rec_normalize)
        percep = L.perceptual_loss(r_hat, r_gt, None, None, state.extractor)
        total = L.total_loss(L.LossParts(rec=rec, percep=percep), cfg.weights, use_adversarial=False)
        T.backward(total)
    clip_grad_norm(state.trainable("g_r"), cfg.clip_grad_norm)
    state.adam["g_r"].step(state.trainable("g_r"))
    parts = {"rec": rec.item(), "percep": percep.item()}
    write_row(1, parts, total.item())
    return total.item()


def _phase2_step(state: TrainerState, batch, has_r: bool, write_row) -> float:
    cfg = state.config
    use_adv = cfg.model.use_adversarial
    state.zero_grads()
    i_obs = _stack(batch, "i")
    t_gt = _stack(batch, "t")
    r_gt = _stack(batch, "r") if has_r else None

    with T.Tape():
        r_hat = forward_gr(state.nets["g_r"], i_obs)
        r_in = r_hat.detach() if cfg.stop_gradient_r else r_hat
        t_hat, masks = forward_gt(state.nets["g_t"], i_obs, r_in)

        if use_adv:
            l_d = L.adv_d_loss(state.nets["disc"], i_obs, t_gt, t_hat.detach())
            T.backward(l_d)
            clip_grad_norm(state.trainable("disc"), cfg.clip_grad_norm)
            state.adam["disc"].step(state.trainable("disc"))
            state.nets["disc"].zero_grad()

        parts = L.LossParts()
        if has_r:
            parts.rec = L.rec_loss(t_hat, t_gt, r_hat, r_gt, normalize=cfg.rec_normalize)
            parts.percep = L.perceptual_loss(t_hat, t_gt, r_hat, r_gt, state.extractor)
            parts.mask = L.mask_loss(masks, r_gt, cfg.thresholds, normalize=cfg.mask_normalize)
        else:
            parts.rec = L.rec_loss(t_hat, t_gt, normalize=cfg.rec_normalize)
            parts.percep = L.perceptual_loss(t_hat, t_gt, None, None, state.extractor)
        parts.excl = L.exclusion_loss(t_hat, r_hat)
        if use_adv:
            parts.adv = L.adv_g_loss(state.nets["disc"], i_obs, t_hat)
        total = L.total_loss(parts, cfg.weights, use_adversarial=use_adv)
        T.backward(total)

    clip_grad_norm(state.trainable("g_r"), cfg.clip_grad_norm)
    clip_grad_norm(state.trainable("g_t"), cfg.clip_grad_norm)
    state.adam["g_r"].step(state.trainable("g_r"))
    state.adam["g_t"].step(state.trainable("g_t"))
    vals = {k: (getattr(parts, k).item() if getattr(parts, k) is not None else 0.0)
            for k in ("rec", "percep", "excl", "adv", "mask")}
    write_row(2, vals, total.item())
    return total.item()
