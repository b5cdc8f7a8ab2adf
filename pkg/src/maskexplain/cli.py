"""Command line entry point: ``maskexplain <command> [options]``.

Every command writes ``config.txt`` (key=value) into its output directory;
``maskexplain replay <config.txt> --out DIR`` reruns it.
"""

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .blackbox import (BlackBox, LinearModel, RegionMeanModel, generate_shape_corpus, load_corpus,
                       load_model, save_corpus, save_model, shape_region, train_tiny_cnn)
from .explain import (ObjectiveConfig, OptimConfig, gradient_saliency, gradient_times_input,
                      learn_mask, occlusion_map)
from .io import load_mpt1, read_kv, save_mpt1, save_pgm, write_kv
from .meta import (LabeledSample, RidgeConfig, faithfulness_q1, faithfulness_q2, max_theta_rule,
                   ridge_saliency)
from .perturb import PerturbSpec

PATH_KEYS = {"model", "corpus", "image", "heatmaps", "test_corpus"}


class UsageError(Exception):
    """Inconsistent flags that argparse alone cannot detect."""


def positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def float_list(text):
    return [float(t) for t in text.split(",") if t.strip()]


def int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def worker_count() -> int:
    env = os.environ.get("MASKEXPLAIN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def derived_seed(seed: int, *keys) -> int:
    """Independent child seed for a sub-task (image index, module...)."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# ---------------------------------------------------------------- inputs


def load_images(args):
    """Return [(image_id, image, label or None)] selected by --image/--corpus/--index."""
    if args.image:
        img = load_mpt1(args.image)
        return [(0, img if img.ndim == 3 else img[:, :, None], None)]
    if not args.corpus:
        raise UsageError("need --image or --corpus")
    corpus = load_corpus(args.corpus)
    idx = args.index if args.index else list(range(len(corpus)))
    return [(i, corpus.images[i], int(corpus.labels[i])) for i in idx]


def pick_class(model: BlackBox, x, label, args):
    if args.cls is not None:
        c = args.cls
    elif label is not None and label < model.num_classes:
        c = label
    else:
        c = int(np.argmax(model.scores(x)))
    if getattr(args, "top5", False):
        order = np.argsort(-model.scores(x), kind="stable")
        return tuple(int(k) for k in order[: min(5, model.num_classes)])
    return c


def perturb_spec(args) -> PerturbSpec:
    return PerturbSpec(kind=args.perturb, mu0=tuple(args.mu0) if args.mu0 else None,
                       sigma0=args.sigma0, noise_sigma=args.noise_sigma,
                       noise_seed=derived_seed(args.seed, 1), flip_blur=args.flip_blur_convention)


def item_dir(out: Path, image_id: int, many: bool) -> Path:
    return out / f"{image_id:05d}" if many else out


def parallel_map(fn, items):
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- commands


def cmd_synth(args, out: Path):
    corpus = generate_shape_corpus(args.n, args.seed)
    save_corpus(corpus, out)
    print(f"wrote {len(corpus)} images to {out}")


def cmd_train(args, out: Path):
    corpus = load_corpus(args.corpus)
    if args.test_corpus:
        train, test = corpus, load_corpus(args.test_corpus)
    else:
        n_test = int(round(len(corpus) * args.test_fraction))
        train, test = corpus.subset(0, len(corpus) - n_test), corpus.subset(len(corpus) - n_test, len(corpus))
    model, report = train_tiny_cnn(train, args.epochs, args.lr, args.seed,
                                   test if len(test) else None,
                                   momentum=args.momentum, weight_decay=args.weight_decay)
    save_model(model, out)
    rows = ["epoch,loss"] + [f"{i + 1},{loss!r}" for i, loss in enumerate(report.epoch_losses)]
    (out / "training.csv").write_text("\n".join(rows) + "\n")
    print(f"train accuracy {report.train_accuracy:.4f}")
    print(f"test accuracy {report.test_accuracy:.4f}")


def cmd_fixture(args, out: Path):
    s = args.size
    if len(args.box) != 4:
        raise UsageError("--box must be x0,y0,x1,y1 inside the image")
    x0, y0, x1, y1 = args.box
    if not (0 <= x0 < x1 <= s and 0 <= y0 < y1 <= s):
        raise UsageError("--box must be x0,y0,x1,y1 inside the image")
    if args.kind == "region-mean":
        model = RegionMeanModel.from_boxes(s, s, [tuple(args.box)])
    else:
        w = np.zeros((s, s, 1))
        w[y0:y1, x0:x1] = 1.0
        model = LinearModel(w)
    save_model(model, out / "model")
    rng = np.random.default_rng(args.seed)
    img = 0.1 * rng.random((s, s, 1))
    img[y0:y1, x0:x1] = 1.0
    save_mpt1(out / "image.mpt1", img)
    print(f"wrote {args.kind} fixture to {out}")


def _explain_one(model, spec, args, item, many, out):
    image_id, x, label = item
    c = pick_class(model, x, label, args)
    cfg = ObjectiveConfig(game=args.game, lambda1=args.lambda1, lambda2=args.lambda2, beta=args.beta,
                          target_class=c, jitter_tau=args.jitter, robust=not args.full_res)
    opt = OptimConfig(lr=args.lr, iters=args.iters, upsample_scale=args.scale,
                      mask_blur_sigma=args.mask_blur, seed=derived_seed(args.seed, 2, image_id))
    res = learn_mask(model, spec, x, cfg, opt)
    res.save(item_dir(out, image_id, many))
    return image_id, res.final_scores


def cmd_explain(args, out: Path):
    model = load_model(args.model)
    items = load_images(args)
    many = len(items) > 1 or args.image is None
    spec = perturb_spec(args)
    results = parallel_map(lambda it: _explain_one(model, spec, args, it, many, out), items)
    if many:
        with open(out / "scores.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "p0", "p_masked", "p_b", "pprime"])
            for image_id, scores in results:
                w.writerow([image_id, *map(repr, map(float, scores))])
    for image_id, (p0, p, pb, pp) in results[:10]:
        print(f"image {image_id}: p0={p0:.4f} p={p:.4f} pb={pb:.4f} p'={pp:.4f}")


def cmd_saliency(args, out: Path):
    model = load_model(args.model)
    items = load_images(args)
    many = len(items) > 1 or args.image is None
    spec = perturb_spec(args)

    def one(item):
        image_id, x, label = item
        c = pick_class(model, x, label, args)
        if args.method == "grad":
            h = gradient_saliency(model, x, c)
        elif args.method == "gradxinput":
            h = gradient_times_input(model, x, c)
        else:
            h = occlusion_map(model, spec, x, c, args.window, args.stride)
        d = item_dir(out, image_id, many)
        d.mkdir(parents=True, exist_ok=True)
        save_mpt1(d / "saliency.mpt1", h)
        save_pgm(d / "saliency.pgm", h)

    parallel_map(one, items)
    print(f"wrote {len(items)} {args.method} heatmap(s) to {out}")


def _find_heatmap(hdir: Path, i: int, name: str = "saliency.mpt1"):
    for p in (hdir / f"{i:05d}" / name, hdir / f"{i:05d}.mpt1"):
        if p.exists():
            return load_mpt1(p)
    raise FileNotFoundError(f"no heatmap for image {i} under {hdir}")


def _find_mask(hdir: Path, i: int):
    p = hdir / f"{i:05d}" / "upsampled_mask.mpt1"
    if p.exists():
        return load_mpt1(p)
    return 1.0 - ev.normalize_heatmap(_find_heatmap(hdir, i))


def cmd_eval(args, out: Path):
    corpus = load_corpus(args.corpus)
    idx = args.index if args.index else list(range(len(corpus)))
    hdir = Path(args.heatmaps)
    heatmaps = [_find_heatmap(hdir, i) for i in idx]
    gts = [ev.Box(*map(int, corpus.boxes[i])) for i in idx]
    records = []
    summary_rows = []
    if args.protocol == "localization":
        schemes = args.schemes.split(",")
        k = args.holdout
        for scheme in schemes:
            alphas = ev.SCHEME_ALPHAS[scheme]
            boxes = {a: [ev.heatmap_box(h, scheme, a) for h in heatmaps] for a in alphas}
            for a in alphas:
                for i, b, g in zip(idx, boxes[a], gts):
                    v = ev.iou(b, g) if b is not None else 0.0
                    records.append(ev.EvalRecord(i, args.method, scheme, a, b, v, ev.is_localized(b, g)))
            pick = {a: ev.localization_error(zip(boxes[a][:k], gts[:k])) for a in alphas} if k else None
            test = {a: ev.localization_error(zip(boxes[a][k:], gts[k:])) for a in alphas}
            a_star, _ = ev.best_alpha(pick if k else test)
            for a in alphas:
                summary_rows.append([args.method, scheme, a, repr(test[a]), int(a == a_star)])
            print(f"{scheme}: alpha*={a_star} error={test[a_star]:.4f}")
        header = ["method", "scheme", "alpha", "error", "best"]
    elif args.protocol == "pointing":
        hits = []
        for i, h in zip(idx, heatmaps):
            hit = ev.pointing(h, shape_region(corpus, i), args.tolerance)
            hits.append(hit)
            records.append(ev.EvalRecord(i, args.method, "pointing", 0.0, None, 0.0, hit))
        precision = sum(hits) / len(hits)
        summary_rows.append([args.method, args.tolerance, repr(precision)])
        header = ["method", "tolerance", "precision"]
        print(f"pointing precision {precision:.4f}")
    elif args.protocol == "deletion":
        model = load_model(args.model)
        spec = perturb_spec(args)
        levels = {lv: [] for lv in ev.SUPPRESSION_LEVELS}
        for i, h in zip(idx, heatmaps):
            c = args.cls if args.cls is not None else int(corpus.labels[i])
            points, smallest = ev.deletion_curve(model, spec, corpus.images[i], c, h)
            for pt in points:
                v = ev.iou(pt.box, gts[idx.index(i)]) if pt.box is not None else 0.0
                records.append(ev.EvalRecord(i, args.method, "deletion", pt.alpha, pt.box, v, False, pt.pprime))
            for lv, area in smallest.items():
                levels[lv].append(area)
        for lv, areas in levels.items():
            found = [a for a in areas if a is not None]
            mean_area = repr(float(np.mean(found))) if found else ""
            summary_rows.append([args.method, lv, len(found), mean_area])
        header = ["method", "level", "n_found", "mean_area"]
    else:  # slices
        model = load_model(args.model)
        spec = perturb_spec(args)
        per_alpha = {a: [] for a in ev.VALUE_ALPHAS}
        from .perturb import Perturber

        for i in idx:
            c = args.cls if args.cls is not None else int(corpus.labels[i])
            x = corpus.images[i]
            pert = Perturber(spec, x)
            p0 = float(model.scores(x)[c])
            pb = float(model.scores(pert.fully_perturbed())[c])
            for a, sm in zip(ev.VALUE_ALPHAS, ev.slice_masks(_find_mask(hdir, i), args.slice_blur)):
                pp = ev.normalized_score(float(model.scores(pert.apply(sm))[c]), p0, pb)
                box = ev.tightest_box(sm < 0.5)
                records.append(ev.EvalRecord(i, args.method, "slices", a, box, 0.0, False, pp))
                per_alpha[a].append(pp)
        for a, vals in per_alpha.items():
            summary_rows.append([args.method, a, repr(float(np.mean(vals)))])
        header = ["method", "alpha", "mean_pprime"]
    ev.write_records(out / "results.csv", records)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(summary_rows)


def cmd_meta(args, out: Path):
    model = load_model(args.model)
    reports = []
    if args.rule == "ridge":
        items = load_images(args)
        for image_id, x, label in items:
            c = pick_class(model, x, label, args)
            w = ridge_saliency(model, x, c, RidgeConfig(args.ridge_lambda, args.ridge_sigma, args.ridge_n,
                                                       derived_seed(args.seed, 3, image_id), args.ridge_sampling))
            d = item_dir(out, image_id, len(items) > 1)
            d.mkdir(parents=True, exist_ok=True)
            save_mpt1(d / "ridge_w.mpt1", w)
            save_pgm(d / "ridge_w.pgm", np.abs(w).max(axis=2))
        print(f"wrote ridge weights for {len(items)} image(s)")
        return
    corpus = load_corpus(args.corpus)
    idx = args.index if args.index else list(range(len(corpus)))
    c = args.cls if args.cls is not None else 0
    if args.rule == "q1":
        samples = [LabeledSample(corpus.images[i], int(corpus.labels[i]) == c) for i in idx]
        reports.append(faithfulness_q1(model, c, args.threshold, samples))
    elif args.rule == "q2":
        xs = [corpus.images[i] for i in idx]
        for a in args.angles:
            reports.append(faithfulness_q2(model, c, xs, [a]))
            reports[-1].theta = a
    else:
        xs = [corpus.images[i] for i in idx]
        for eps in args.epsilon:
            reports.append(max_theta_rule(model, c, xs, sorted(args.angles), eps))
    with open(out / "rules.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rule", "theta", "epsilon", "n", "error"])
        for r in reports:
            w.writerow(r.row())
    for r in reports:
        print(f"{r.rule_id}: error={r.faithfulness_error:.4f} theta={r.theta} n={r.n}")


# ---------------------------------------------------------------- parser


def _add_image_args(p):
    p.add_argument("--image", help="MPT1 image file")
    p.add_argument("--corpus", help="corpus directory")
    p.add_argument("--index", type=int_list, help="comma-separated corpus indices (default all)")
    p.add_argument("--class", dest="cls", type=nonneg_int, help="target class")


def _add_perturb_args(p):
    p.add_argument("--perturb", choices=("blur", "constant", "noise"), default="blur")
    p.add_argument("--sigma0", type=float, default=10.0)
    p.add_argument("--mu0", type=float_list, help="fill colour per channel (default image mean)")
    p.add_argument("--noise-sigma", type=float, default=0.2)
    p.add_argument("--flip-blur-convention", action="store_true",
                   help="blur with sigma0*m instead of sigma0*(1-m)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskexplain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shape corpus")
    p.add_argument("--n", type=positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the tiny CNN on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--test-corpus")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--epochs", type=nonneg_int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fixture", help="write an analytic model and a matching test image")
    p.add_argument("--kind", choices=("region-mean", "linear"), default="region-mean")
    p.add_argument("--size", type=positive_int, default=64)
    p.add_argument("--box", type=int_list, default=[24, 16, 40, 32], help="x0,y0,x1,y1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("explain", help="learn a perturbation mask")
    p.add_argument("--model", required=True)
    _add_image_args(p)
    _add_perturb_args(p)
    p.add_argument("--game", choices=("deletion", "preservation"), default="deletion")
    p.add_argument("--lambda1", type=float, default=1e-4)
    p.add_argument("--lambda2", type=float, default=1e-2)
    p.add_argument("--beta", type=float, default=3.0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--iters", type=nonneg_int, default=300)
    p.add_argument("--scale", type=positive_int, default=8)
    p.add_argument("--mask-blur", type=float, default=5.0)
    p.add_argument("--jitter", type=nonneg_int, default=4)
    p.add_argument("--full-res", action="store_true", help="optimize a full-resolution mask directly")
    p.add_argument("--top5", action="store_true", help="minimize the sum of the top-5 class scores")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("saliency", help="gradient or occlusion heatmaps")
    p.add_argument("--model", required=True)
    _add_image_args(p)
    _add_perturb_args(p)
    p.add_argument("--method", choices=("grad", "gradxinput", "occlusion"), default="grad")
    p.add_argument("--window", type=positive_int, default=8)
    p.add_argument("--stride", type=positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("eval", help="evaluate heatmaps against a corpus")
    p.add_argument("--model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--heatmaps", required=True)
    p.add_argument("--index", type=int_list)
    p.add_argument("--class", dest="cls", type=nonneg_int)
    p.add_argument("--protocol", choices=("localization", "pointing", "deletion", "slices"), default="localization")
    p.add_argument("--method", default="mask", help="label written to the results")
    p.add_argument("--schemes", default="value,energy,mean")
    p.add_argument("--holdout", type=nonneg_int, default=0,
                   help="first K images select alpha*, the rest are scored")
    p.add_argument("--tolerance", type=nonneg_int, default=15)
    p.add_argument("--slice-blur", type=float, default=1.0)
    _add_perturb_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("meta", help="faithfulness of explanatory rules")
    p.add_argument("--model", required=True)
    _add_image_args(p)
    p.add_argument("--rule", choices=("q1", "q2", "q3", "ridge"), required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--angles", type=int_list, default=[90, 180, 270])
    p.add_argument("--epsilon", type=float_list, default=[0.1])
    p.add_argument("--ridge-lambda", type=float, default=1e-2)
    p.add_argument("--ridge-sigma", type=float, default=0.1)
    p.add_argument("--ridge-n", type=positive_int, default=10000)
    p.add_argument("--ridge-sampling", choices=("orthogonal", "iid"), default="orthogonal")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_meta)

    for p in sub.choices.values():
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("replay", help="rerun a command from its config.txt")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    return parser


def _config_values(args, parser: argparse.ArgumentParser) -> dict:
    sub = parser._subparsers._group_actions[0].choices[args.command]
    values = {"command": args.command}
    for action in sub._actions:
        if action.dest in ("help", "out"):
            continue
        v = getattr(args, action.dest)
        if action.dest in PATH_KEYS and v:
            v = str(Path(v).resolve())
        values[action.dest] = v
    return values


def _argv_from_config(cfg: dict, parser: argparse.ArgumentParser) -> list:
    command = cfg["command"]
    sub = parser._subparsers._group_actions[0].choices[command]
    argv = [command]
    for action in sub._actions:
        if action.dest not in cfg or not action.option_strings:
            continue
        v = cfg[action.dest]
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if v == "True":
                argv.append(flag)
        elif v != "":
            argv += [flag, v]
    return argv


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "replay":
        cfg = read_kv(args.config)
        args = parser.parse_args(_argv_from_config(cfg, parser) + ["--out", args.out])
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_kv(out / "config.txt", _config_values(args, parser))
        args.func(args, out)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"maskexplain: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
