"""Command-line interface.

Subcommands: preprocess, train, predict, ensemble, evaluate, gradcheck,
selftest. Exit codes: 0 success, 1 usage error, 2 data or check failure.
"""

import argparse
import os
import sys

import numpy as np

from . import reference
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    CacheError,
    CaseRecord,
    cache_case,
    load_case,
    make_sphere_case,
    normalize,
    pad_to_shape,
    stack_modalities,
    MODALITY_ORDER,
)
from .gradcheck import check_model_gradients, run_op_suite
from .inference import (
    DEFAULT_ET_THRESHOLD,
    InferenceConfig,
    PostprocConfig,
    external_to_internal,
    internal_to_external,
    majority_vote,
    predict_case,
    predict_probs,
    tta_predict,
    volume_threshold_postprocess,
)
from .metrics import evaluate_case, format_report, hd95
from .model import BiTrUnetModel, ModelConfig
from .nifti import NiftiError, read_nifti, write_nifti
from .training import AugmentConfig, LossConfig, TrainConfig, train_loop


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def _build_parser():
    p = _Parser(prog="bitrunet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pp = sub.add_parser("preprocess", help="stack modality NIfTIs into a cache file")
    for m in MODALITY_ORDER:
        pp.add_argument(f"--{m}", required=True, help=f"{m.upper()} NIfTI path")
    pp.add_argument("--label", help="segmentation label NIfTI path")
    pp.add_argument("--case-id", required=True)
    pp.add_argument("--out", required=True, help="output .btrc path")
    pp.add_argument("--no-normalize", action="store_true")

    tr = sub.add_parser("train", help="train from a directory of cache files")
    tr.add_argument("--data", required=True, help="directory of .btrc files")
    tr.add_argument("--out", required=True, help="run directory")
    tr.add_argument("--config", required=True, help="key=value config file")

    pr = sub.add_parser("predict", help="segment one case")
    pr.add_argument("--models", nargs="+", required=True, help="checkpoint file(s)")
    pr.add_argument("--input", required=True, help=".btrc file or case directory")
    pr.add_argument("--out", required=True, help="output mask NIfTI path")
    pr.add_argument("--tta", action="store_true", help="average the 8 flip variants")
    pr.add_argument("--postproc-threshold", type=int, default=DEFAULT_ET_THRESHOLD,
                    help="min ET component volume in voxels, 0 disables")
    pr.add_argument("--dump-probs", help="also write raw float32 probabilities here")

    en = sub.add_parser("ensemble", help="vote over dumped probability maps")
    en.add_argument("--probs", nargs="+", required=True,
                    help="probability dumps from predict --dump-probs")
    en.add_argument("--out", required=True)
    en.add_argument("--postproc-threshold", type=int, default=DEFAULT_ET_THRESHOLD)

    ev = sub.add_parser("evaluate", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True, help="directory of predicted masks")
    ev.add_argument("--truth", required=True, help="directory of reference masks")
    ev.add_argument("--out", help="report path (default: stdout)")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--instances", type=int, default=20)

    sub.add_parser("selftest", help="run the brute-force oracle comparisons")
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_config_file(path):
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: malformed config line {line!r}")
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    return kv


def _find_modality_files(case_dir):
    names = sorted(os.listdir(case_dir))
    paths = []
    for m in MODALITY_ORDER:
        hits = [
            n
            for n in names
            for ext in (".nii", ".nii.gz")
            if n == f"{m}{ext}" or n.endswith(f"_{m}{ext}")
        ]
        if len(hits) != 1:
            raise ValueError(
                f"{case_dir}: expected exactly one {m} NIfTI, found {hits}"
            )
        paths.append(os.path.join(case_dir, hits[0]))
    return paths


def _load_input_case(path):
    if os.path.isdir(path):
        vol = normalize(stack_modalities(_find_modality_files(path)))
        return CaseRecord(case_id=os.path.basename(os.path.normpath(path)), volume=vol)
    return load_case(path)


def _write_prob_dump(path, probs):
    np.ascontiguousarray(probs, dtype="<f4").tofile(path)
    k = probs.shape[0]
    with open(path + ".hdr", "w") as fh:
        fh.write(f"dims: {k} {probs.shape[1]} {probs.shape[2]} {probs.shape[3]}\n")
        fh.write("classes: 0 1 2 4\n")
        fh.write("dtype: float32 little-endian\n")


def _read_prob_dump(path):
    hdr_path = path + ".hdr"
    if not os.path.exists(hdr_path):
        raise ValueError(f"{path}: missing sidecar header {hdr_path}")
    dims = None
    with open(hdr_path) as fh:
        for line in fh:
            if line.startswith("dims:"):
                dims = tuple(int(t) for t in line.split(":", 1)[1].split())
    if dims is None or len(dims) != 4:
        raise ValueError(f"{hdr_path}: no valid 'dims:' line")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise ValueError(
            f"{path}: payload has {raw.size} floats, header says {dims}"
        )
    return raw.reshape(dims).astype(np.float64)


def _postproc_from_threshold(et_threshold):
    if et_threshold and et_threshold > 0:
        return PostprocConfig(thresholds={3: int(et_threshold)})
    return PostprocConfig()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_preprocess(args):
    paths = [getattr(args, m) for m in MODALITY_ORDER]
    vol = stack_modalities(paths)
    if not args.no_normalize:
        vol = normalize(vol)
    label = None
    if args.label:
        _, label_data = read_nifti(args.label)
        label = np.asarray(label_data, dtype=np.uint8)
    record = CaseRecord(
        case_id=args.case_id,
        volume=vol,
        label=label,
        paths=dict(zip(MODALITY_ORDER, paths)),
    )
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    cache_case(record, args.out)
    print(f"cached {args.case_id}: image {vol.data.shape} -> {args.out}")
    return 0


def _cfg_get(kv, key, cast, default):
    return cast(kv[key]) if key in kv else default


def _cmd_train(args):
    kv = _load_config_file(args.config)
    crop = _cfg_get(kv, "crop_size", int, 32)
    model_cfg = ModelConfig(
        in_channels=_cfg_get(kv, "in_channels", int, 4),
        base_width=_cfg_get(kv, "base_width", int, 16),
        num_classes=_cfg_get(kv, "num_classes", int, 4),
        embed_dim=_cfg_get(kv, "embed_dim", int, 384),
        vit_layers=_cfg_get(kv, "vit_layers", int, 4),
        heads=_cfg_get(kv, "heads", int, 8),
        ffn_hidden=_cfg_get(kv, "ffn_hidden", int, 0),
        input_size=(crop, crop, crop),
        cbam_reduction=_cfg_get(kv, "cbam_reduction", int, 8),
        norm_groups=_cfg_get(kv, "norm_groups", int, 8),
    )
    seed = _cfg_get(kv, "seed", int, 0)
    use_augment = _cfg_get(kv, "augment", int, 1)
    augment_cfg = None
    if use_augment:
        augment_cfg = AugmentConfig(
            crop_size=crop,
            shift_range=(-_cfg_get(kv, "shift", float, 0.1),
                         _cfg_get(kv, "shift", float, 0.1)),
            scale_range=(_cfg_get(kv, "scale_min", float, 0.9),
                         _cfg_get(kv, "scale_max", float, 1.1)),
        )
    train_cfg = TrainConfig(
        iters=_cfg_get(kv, "iters", int, 300),
        base_lr=_cfg_get(kv, "base_lr", float, 2e-4),
        power=_cfg_get(kv, "power", float, 0.9),
        batch_size=_cfg_get(kv, "batch_size", int, 1),
        grad_accum=_cfg_get(kv, "grad_accum", int, 1),
        seed=seed,
        checkpoint_every=_cfg_get(kv, "checkpoint_every", int, 0),
        augment=augment_cfg,
        loss=LossConfig(
            w_ce=_cfg_get(kv, "w_ce", float, 1.0),
            w_dice=_cfg_get(kv, "w_dice", float, 1.0),
            num_classes=model_cfg.num_classes,
        ),
    )
    files = sorted(
        os.path.join(args.data, f)
        for f in os.listdir(args.data)
        if f.endswith(".btrc")
    )
    if not files:
        raise ValueError(f"{args.data}: no .btrc cache files found")
    dataset = []
    for f in files:
        rec = load_case(f)
        if rec.label is None:
            raise ValueError(f"{f}: case has no label, cannot train on it")
        label = external_to_internal(rec.label).astype(np.int64)
        if not use_augment and rec.volume.data.shape[1:] != model_cfg.input_size:
            raise ValueError(
                f"{f}: volume {rec.volume.data.shape[1:]} does not match model "
                f"input {model_cfg.input_size} and augmentation is off"
            )
        dataset.append((rec.volume.data, label))
    model = BiTrUnetModel(model_cfg, seed=seed, dtype=np.float32)
    history = train_loop(model, dataset, train_cfg, out_dir=args.out)
    if history:
        it, lr, total, ce, dce = history[-1]
        print(f"trained {len(history)} iters; final loss {total:.5f} "
              f"(ce {ce:.5f}, dice {dce:.5f})")
    else:
        print("zero iterations requested; wrote the initial checkpoint only")
    print(f"run artifacts in {args.out}")
    return 0


def _cmd_predict(args):
    models = [load_checkpoint(p) for p in args.models]
    record = _load_input_case(args.input)
    target = models[0].config.input_size
    data, region = pad_to_shape(record.volume.data, target)
    cfg = InferenceConfig(
        tta=args.tta, postproc=_postproc_from_threshold(args.postproc_threshold)
    )
    if args.dump_probs:
        predictor = tta_predict if args.tta else predict_probs
        probs = [predictor(m, data) for m in models]
        masks = [p.argmax(axis=0) for p in probs]
        voted = majority_vote(masks, probs)
        cleaned = volume_threshold_postprocess(voted, cfg.postproc)
        mask = internal_to_external(cleaned)
        _write_prob_dump(args.dump_probs, np.mean(np.stack(probs), axis=0))
    else:
        mask = predict_case(models, data, cfg)
    mask = mask[region]
    write_nifti(args.out, mask.astype(np.uint8), spacing=record.volume.spacing)
    labels = sorted(np.unique(mask).tolist())
    print(f"wrote {args.out} (labels present: {labels})")
    return 0


def _cmd_ensemble(args):
    probs = [_read_prob_dump(p) for p in args.probs]
    shape = probs[0].shape
    for p, path in zip(probs, args.probs):
        if p.shape != shape:
            raise ValueError(f"{path}: shape {p.shape} differs from {shape}")
    masks = [p.argmax(axis=0) for p in probs]
    voted = majority_vote(masks, probs)
    cleaned = volume_threshold_postprocess(
        voted, _postproc_from_threshold(args.postproc_threshold)
    )
    write_nifti(args.out, internal_to_external(cleaned).astype(np.uint8))
    print(f"wrote {args.out} from {len(probs)} probability maps")
    return 0


def _cmd_evaluate(args):
    def mask_files(d):
        return {
            f: os.path.join(d, f)
            for f in os.listdir(d)
            if f.endswith(".nii") or f.endswith(".nii.gz")
        }

    preds = mask_files(args.pred)
    truths = mask_files(args.truth)
    common = sorted(set(preds) & set(truths))
    if not common:
        raise ValueError(
            f"no matching mask filenames between {args.pred} and {args.truth}"
        )
    results = {}
    for name in common:
        hdr, pred = read_nifti(preds[name])
        _, truth = read_nifti(truths[name])
        case_id = name.replace(".nii.gz", "").replace(".nii", "")
        results[case_id] = evaluate_case(
            np.asarray(pred), np.asarray(truth), spacing=hdr.spacing
        )
    report = format_report(results)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report)
        print(f"wrote {args.out} ({len(common)} cases)")
    else:
        sys.stdout.write(report)
    return 0


def _cmd_gradcheck(args):
    results = run_op_suite(instances=args.instances)
    worst = 0.0
    for name in sorted(results):
        print(f"  {name:28s} {results[name]:.3e}")
        worst = max(worst, results[name])
    from .tensor import Tensor

    cfg = ModelConfig(
        in_channels=2, base_width=4, num_classes=4, embed_dim=16,
        vit_layers=1, heads=2, ffn_hidden=32, input_size=(16, 16, 16),
    )
    model = BiTrUnetModel(cfg, seed=0, dtype=np.float64)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 16, 16, 16)))
    model_err = check_model_gradients(model, x, samples=50)
    print(f"  {'full model':28s} {model_err:.3e}")
    print(f"max relative error (ops): {worst:.3e}")
    ok = worst < 1e-4 and model_err < 1e-3
    print("gradcheck", "PASSED" if ok else "FAILED")
    return 0 if ok else 2


def _cmd_selftest(args):
    import tempfile

    from . import kernels
    from .tensor import ConvSpec, Tensor, conv3d, conv_transpose3d

    rng = np.random.default_rng(0)
    checks = []

    def run(name, fn):
        ok = bool(fn())
        checks.append(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}")

    def conv_vs_naive():
        worst = 0.0
        for _ in range(5):
            x = rng.standard_normal((1, 2, 5, 5, 5))
            w = rng.standard_normal((3, 2, 3, 3, 3))
            for stride in (1, 2):
                got = kernels.conv3d_forward(x, w, stride, 1)
                ref = reference.naive_conv3d(x, w, stride, 1)
                worst = max(worst, float(np.abs(got - ref).max()))
        return worst < 1e-9

    def matmul_vs_naive():
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        return np.abs(a @ b - reference.naive_matmul(a, b)).max() < 1e-10

    def adjointness():
        worst = 0.0
        for _ in range(5):
            spec = ConvSpec(2, 3, stride=2, padding=1)
            tspec = ConvSpec(3, 2, stride=2, padding=1, transposed=True)
            x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
            y = Tensor(rng.standard_normal((1, 3, 2, 2, 2)))
            w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
            lhs = float((conv3d(x, spec, w, None).data * y.data).sum())
            rhs = float((x.data * conv_transpose3d(y, tspec, w, None).data).sum())
            worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-12))
        return worst < 1e-6

    def vote_oracle():
        for _ in range(20):
            n = int(rng.integers(1, 5))
            masks = [rng.integers(0, 4, (3, 3, 3)) for _ in range(n)]
            probs = [rng.random((4, 3, 3, 3)) for _ in range(n)]
            got = majority_vote(masks, probs)
            ref = reference.brute_force_vote(masks, probs)
            if not np.array_equal(got, ref):
                return False
        return True

    def postproc_oracle():
        for _ in range(20):
            mask = rng.integers(0, 4, (6, 6, 6))
            thr = {1: 3, 2: 5, 3: 2}
            got = volume_threshold_postprocess(
                mask, PostprocConfig(thresholds=thr)
            )
            ref = reference.brute_force_postprocess(mask, thr)
            if not np.array_equal(got, ref):
                return False
        return True

    def hd95_oracle():
        for _ in range(10):
            a = rng.random((6, 6, 6)) < 0.2
            b = rng.random((6, 6, 6)) < 0.2
            if abs(hd95(a, b) - reference.brute_force_hd95(a, b)) > 1e-9:
                return False
        return True

    def roundtrips():
        with tempfile.TemporaryDirectory() as td:
            vol = rng.standard_normal((4, 4, 4)).astype(np.float32)
            path = os.path.join(td, "v.nii.gz")
            write_nifti(path, vol)
            _, back = read_nifti(path)
            if not np.array_equal(vol, back):
                return False
            rec = make_sphere_case(size=16, radius=4)
            cpath = os.path.join(td, "c.btrc")
            cache_case(rec, cpath)
            rec2 = load_case(cpath)
            return np.array_equal(rec.volume.data, rec2.volume.data) and np.array_equal(
                rec.label, rec2.label
            )

    run("conv3d vs naive loop oracle", conv_vs_naive)
    run("matmul vs triple loop oracle", matmul_vs_naive)
    run("transposed conv adjointness", adjointness)
    run("majority vote vs brute force", vote_oracle)
    run("postprocess vs flood fill", postproc_oracle)
    run("hd95 vs all-pairs oracle", hd95_oracle)
    run("file format roundtrips", roundtrips)
    ok = all(checks)
    print("selftest", "PASSED" if ok else "FAILED")
    return 0 if ok else 2


_COMMANDS = {
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "ensemble": _cmd_ensemble,
    "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck,
    "selftest": _cmd_selftest,
}

_DATA_ERRORS = (
    NiftiError,
    CacheError,
    CheckpointError,
    ValueError,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
    PermissionError,
)


def cli(argv=None):
    """Entry point used by tests; returns the exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _DATA_ERRORS as exc:
        sys.stderr.write(f"bitrunet {args.command}: {exc}\n")
        return 2


def main():
    sys.exit(cli())
