"""Command-line interface: synthesis, training, inference, evaluation, checks.

Configuration is a flat key=value table.  Values come from built-in defaults
(the published ones wherever the source material states a value: thresholds
phi=0.3, xi=0.01, tau=0.40, loss weights 1/1/0.2/0.01/1, Adam betas
0.9/0.999, lr=1e-4), optionally overridden by a ``--config`` file of
``key = value`` lines (``#`` comments), then by ``--key value`` flags.
Unknown keys are rejected.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 I/O failure.
``RAGNET_THREADS`` caps worker parallelism for per-image work (default 1,
keeping runs deterministic by default; results are order-stable either way).
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

import ragnet.tensor as T
from ragnet import losses as L
from ragnet import metrics as ME
from ragnet import model as M
from ragnet import synthesis as S
from ragnet import trainer as TR
from ragnet.gradcheck import run_suite

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3

# key -> (default, parser, help)
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(s: str) -> bool:
    try:
        return _BOOL[str(s).strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean (true/false), got {s!r}")


CONFIG_KEYS: dict[str, tuple[object, type | object, str]] = {
    "width_multiplier": (0.125, float, "channel-width scale; 1.0 = published widths"),
    "rag_variant": ("full", str, f"decoder variant, one of {'/'.join(M.RAG_VARIANTS)}"),
    "use_adversarial": (True, _parse_bool, "enable the adversarial term and critic training"),
    "seed": (0, int, "master seed; all randomness derives from it"),
    "phi": (0.3, float, "heavy-reflection threshold of the mask loss"),
    "xi": (0.01, float, "near-clean threshold of the mask loss"),
    "tau": (0.40, float, "weak/strong split threshold for region-weighted PSNR"),
    "lambda_rec": (1.0, float, "reconstruction loss weight"),
    "lambda_percep": (1.0, float, "perceptual loss weight"),
    "lambda_excl": (0.2, float, "exclusion loss weight"),
    "lambda_adv": (0.01, float, "adversarial loss weight"),
    "lambda_mask": (1.0, float, "mask loss weight"),
    "lr": (1e-4, float, "Adam learning rate (fixed)"),
    "adam_beta1": (0.9, float, "Adam first-moment decay"),
    "adam_beta2": (0.999, float, "Adam second-moment decay"),
    "adam_eps": (1e-8, float, "Adam denominator epsilon"),
    "phase1_epochs": (2, int, "reflection-pretraining epochs (desk default; published protocol: 50)"),
    "phase2_epochs": (8, int, "joint-training epochs (desk default; published protocol: 100)"),
    "batch_size": (4, int, "training batch size"),
    "blur_sigma_lo": (2.0, float, "reflection blur sigma, lower bound (pixels)"),
    "blur_sigma_hi": (5.0, float, "reflection blur sigma, upper bound (pixels)"),
    "decay_lo": (0.6, float, "reflection intensity decay, lower bound"),
    "decay_hi": (1.0, float, "reflection intensity decay, upper bound"),
    "blend_mode": ("linear_clip", str, "synthesis blend: linear_clip or overexpose"),
    "patch_size": (32, int, "synthesized patch size (desk default; published protocol: 224)"),
    "scale_lo": (1.0, float, "pre-crop scale range lower bound (x patch_size)"),
    "scale_hi": (2.0, float, "pre-crop scale range upper bound (x patch_size)"),
    "overexpose_boost": (0.5, float, "highlight boost factor of the overexpose blend"),
    "saturate_threshold": (1.3, float, "mean T+R level that hard-saturates a pixel"),
    "rec_normalize": (True, _parse_bool, "mean-normalize l1 reconstruction terms"),
    "mask_normalize": (True, _parse_bool, "mean-normalize mask loss selections"),
    "stop_gradient_r": (False, _parse_bool, "block joint-phase gradients through the reflection estimate"),
}


class RunConfig:
    """Validated flat configuration; every key has a documented default."""

    def __init__(self, values: dict[str, object]):
        unknown = sorted(set(values) - set(CONFIG_KEYS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        self._v = {k: d for k, (d, _, _) in CONFIG_KEYS.items()}
        self._v.update(values)

    def __getattr__(self, key):
        try:
            return self._v[key]
        except KeyError:
            raise AttributeError(key)

    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(width_multiplier=self.width_multiplier, rag_variant=self.rag_variant,
                             use_adversarial=self.use_adversarial, seed=self.seed)

    def synthesis_params(self) -> S.SynthesisParams:
        return S.SynthesisParams(blur_sigma_range=(self.blur_sigma_lo, self.blur_sigma_hi),
                                 decay_range=(self.decay_lo, self.decay_hi),
                                 blend_mode=self.blend_mode, patch_size=self.patch_size,
                                 scale_range=(self.scale_lo, self.scale_hi), seed=self.seed,
                                 overexpose_boost=self.overexpose_boost,
                                 saturate_threshold=self.saturate_threshold)

    def train_config(self) -> TR.TrainConfig:
        return TR.TrainConfig(
            model=self.model_config(),
            schedule=TR.Schedule(self.phase1_epochs, self.phase2_epochs, self.batch_size),
            weights=L.LossWeights(self.lambda_rec, self.lambda_percep, self.lambda_excl,
                                  self.lambda_adv, self.lambda_mask),
            thresholds=L.MaskLossThresholds(self.phi, self.xi, self.tau),
            adam=TR.AdamConfig(self.lr, self.adam_beta1, self.adam_beta2, self.adam_eps),
            rec_normalize=self.rec_normalize, mask_normalize=self.mask_normalize,
            stop_gradient_r=self.stop_gradient_r)

    def thresholds(self) -> L.MaskLossThresholds:
        return L.MaskLossThresholds(self.phi, self.xi, self.tau)


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    raw: dict[str, str] = {}
    if getattr(args, "config", None):
        raw.update(parse_config_file(args.config))
    for key in CONFIG_KEYS:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            raw[key] = flag_val
    typed: dict[str, object] = {}
    for key, val in raw.items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config keys: {key}")
        parse = CONFIG_KEYS[key][1]
        try:
            typed[key] = parse(val) if isinstance(val, str) else val
        except ValueError as e:
            raise ValueError(f"config key {key}: {e}")
    return RunConfig(typed)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the CLI contract says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", metavar="FILE", help="key = value configuration file")
    for key, (default, _, help_text) in CONFIG_KEYS.items():
        sp.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="V",
                        help=f"{help_text} (default {default})")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ragnet", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[], help="materialize a synthetic dataset")
    sp.add_argument("--n", type=int, required=True, help="number of triples")
    sp.add_argument("--out", required=True, help="output directory")
    _add_config_flags(sp)

    sp = sub.add_parser("train", help="run the two-phase training protocol")
    sp.add_argument("--data", required=True, help="dataset manifest path")
    sp.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    sp.add_argument("--resume", help="checkpoint to resume from")
    _add_config_flags(sp)

    sp = sub.add_parser("infer", help="remove reflections from one image")
    sp.add_argument("--ckpt", required=True, help="trained checkpoint")
    sp.add_argument("--input", required=True, help="input PPM image")
    sp.add_argument("--out", required=True, help="output directory")
    _add_config_flags(sp)

    sp = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="dataset manifest path")
    sp.add_argument("--out", required=True, help="report directory")
    _add_config_flags(sp)

    sp = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    _add_config_flags(sp)

    sp = sub.add_parser("inspect-mask", help="write guidance-mask heatmaps for one image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--input", required=True, help="input PPM image")
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-channel", action="store_true", help="tile every mask channel (default: channel mean)")
    _add_config_flags(sp)

    sp = sub.add_parser("params", help="print parameter counts per network")
    _add_config_flags(sp)
    return p


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("RAGNET_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    n = _workers()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# inference plumbing shared by infer / eval / inspect-mask

def load_models(ckpt_path):
    model_cfg = TR.model_config_from_checkpoint(ckpt_path)
    state = TR.TrainerState(TR.TrainConfig(model=model_cfg))
    state.load(ckpt_path)
    return state


def infer_image(state: TR.TrainerState, img: np.ndarray):
    """Forward both stages on an NCHW image of any size (reflect-padded to /16)."""
    padded, pads = M.pad_to_multiple(img.astype(np.float32), 16)
    i_t = T.Tensor(padded)
    r_hat = M.forward_gr(state.nets["g_r"], i_t)
    t_hat, masks = M.forward_gt(state.nets["g_t"], i_t, r_hat)
    r_np = M.crop_padding(r_hat.data, pads)
    t_np = M.crop_padding(t_hat.data, pads)
    return r_np, t_np, masks, pads


def cmd_synth(args) -> int:
    cfg = build_config(args)
    if args.n < 0:
        raise ValueError(f"--n must be >= 0, got {args.n}")
    manifest = S.make_dataset(args.n, cfg.synthesis_params(), args.out)
    print(f"wrote {args.n} triples; manifest: {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    if not os.path.exists(args.data):
        raise OSError(f"dataset manifest not found: {args.data}")
    final, log = TR.train(cfg.train_config(), args.data, args.out, resume_from=args.resume)
    print(f"final checkpoint: {final}")
    print(f"training log: {log}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = build_config(args)
    if not os.path.exists(args.ckpt):
        raise OSError(f"checkpoint not found: {args.ckpt}")
    state = load_models(args.ckpt)
    img = S.read_ppm(args.input)
    r_np, t_np, _, _ = infer_image(state, img)
    os.makedirs(args.out, exist_ok=True)
    S.write_ppm(os.path.join(args.out, "R_hat.ppm"), r_np)
    S.write_ppm(os.path.join(args.out, "T_hat.ppm"), t_np)
    S.write_ppm(os.path.join(args.out, "I_minus_R.ppm"), np.clip(img - r_np, 0.0, 1.0))
    print(f"wrote R_hat.ppm, T_hat.ppm, I_minus_R.ppm under {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = build_config(args)
    for path in (args.ckpt, args.data):
        if not os.path.exists(path):
            raise OSError(f"input not found: {path}")
    state = load_models(args.ckpt)
    entries = S.read_manifest(args.data)
    tau = cfg.tau

    def eval_one(entry):
        tr = S.load_triple(entry)
        r_np, t_np, masks, pads = infer_image(state, tr.i)
        level1 = next(m for m in masks if m.level == 1)
        mask_mean = M.crop_padding(level1.m_diff.data, pads)[0].mean(axis=0)
        split = ME.RegionMask(m_w=mask_mean > tau, tau=tau)
        return ME.ImageResult(
            name=f"img{entry.index:04d}",
            psnr=ME.psnr(t_np, tr.t),
            ssim=ME.ssim(t_np, tr.t),
            psnr_weak=ME.region_psnr(t_np, tr.t, split.m_w),
            psnr_strong=ME.region_psnr(t_np, tr.t, split.m_s),
            refl_det_psnr=ME.reflection_detection_psnr(r_np, tr.i, tr.t),
            mask=mask_mean,
            panel=ME.make_panel(tr.i, r_np, t_np))

    results = _pmap(eval_one, entries)
    files = ME.emit_report(results, args.out)
    finite = [r.psnr for r in results if np.isfinite(r.psnr)]
    if finite:
        print(f"mean PSNR {np.mean(finite):.3f} dB over {len(results)} images")
    print(f"report: {files[0]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    build_config(args)  # validates any provided keys
    results = run_suite()
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:{width}s} max rel err {r.max_rel_error:.3e} (tol {r.tolerance:g})")
    if all(r.passed for r in results):
        print(f"all {len(results)} checks passed")
        return EXIT_OK
    print("gradient checks FAILED")
    return EXIT_VALIDATION


def cmd_inspect_mask(args) -> int:
    cfg = build_config(args)
    if not os.path.exists(args.ckpt):
        raise OSError(f"checkpoint not found: {args.ckpt}")
    state = load_models(args.ckpt)
    img = S.read_ppm(args.input)
    _, _, masks, _ = infer_image(state, img)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for ml in masks:
        for tag, m in (("diff", ml.m_diff), ("dec", ml.m_dec)):
            data = m.data[0]
            if args.per_channel:
                img2d = _tile_channels(data)
            else:
                img2d = data.mean(axis=0)
            path = os.path.join(args.out, f"mask_l{ml.level}_{tag}.pgm")
            S.write_pgm(path, np.clip(img2d, 0.0, 1.0))
            written.append(path)
    print(f"wrote {len(written)} heatmaps under {args.out}")
    return EXIT_OK


def _tile_channels(data: np.ndarray) -> np.ndarray:
    c, h, w = data.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    grid = np.zeros((rows * h, cols * w), dtype=data.dtype)
    for idx in range(c):
        r, col = divmod(idx, cols)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = data[idx]
    return grid


def cmd_params(args) -> int:
    cfg = build_config(args)
    mc = cfg.model_config()
    counts = {}
    gt_cfg = mc
    if mc.rag_variant == "one_stage":
        gt_cfg = M.ModelConfig(width_multiplier=mc.width_multiplier, rag_variant="full",
                               use_adversarial=mc.use_adversarial, seed=mc.seed)
    for kind in ("g_r", "g_t", "discriminator", "percep_extractor"):
        counts[kind] = M.count_params(M.build_network(kind, gt_cfg if kind == "g_t" else mc))
    one_cfg = M.ModelConfig(width_multiplier=mc.width_multiplier, rag_variant="one_stage",
                            use_adversarial=mc.use_adversarial, seed=mc.seed)
    counts["one_stage"] = M.count_params(M.build_network("one_stage", one_cfg))
    total = counts["g_r"] + counts["g_t"]
    for kind in ("g_r", "g_t", "one_stage", "discriminator", "percep_extractor"):
        print(f"{kind:16s} {counts[kind]:>12,d}")
    print(f"{'g_r + g_t':16s} {total:>12,d}")
    print(f"one_stage / full = {counts['one_stage'] / total:.4f}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "inspect-mask": cmd_inspect_mask,
    "params": cmd_params,
}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except TR.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
