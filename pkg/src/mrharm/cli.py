"""Operator command line: dataset generation, training, harmonization,
adaptation, evaluation, and figure export.

Every command validates inputs before side effects, writes byte-stable
outputs for a given seed, and never mutates its input dataset directory.
Errors map to distinct exit codes with one machine-parseable line on stderr:
2 usage, 3 missing file, 4 corrupt checkpoint, 5 site/contrast mismatch,
6 invalid value, 7 training diverged, 1 unexpected.
"""

import argparse
import os
import sys

import numpy as np

from .figures import (harmonization_grid, theta_csv, theta_scatter, write_pgm)
from .harmonize import AdaptationConfig, adapt_to_new_site, harmonize, site_theta
from .metrics import (evaluate_harmonization, records_to_csv, summary_table,
                      tests_to_csv)
from .networks import CheckpointError, load_checkpoint, save_checkpoint
from .phantom import (ContrastMismatchError, default_roster, load_dataset,
                      make_dataset, save_dataset)
from .seeds import stream_seed
from .training import TrainConfig, TrainingDiverged, loss_log_csv, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CORRUPT = 4
EXIT_MISMATCH = 5
EXIT_INVALID = 6
EXIT_DIVERGED = 7
EXIT_UNEXPECTED = 1


def _read_config(path):
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value")
            key, _, val = line.partition("=")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _setting(args, config, name, default, cast=None):
    """Flag beats config file beats default."""
    flag_val = getattr(args, name, None)
    if flag_val is not None:
        return flag_val
    if name in config:
        raw = config[name]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes")
        return cast(raw) if cast else raw
    return default


def _parse_sites(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _parse_pairs(text):
    pairs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ValueError(f"bad site pair {part!r}, expected SRC:DST")
        a, _, b = part.partition(":")
        pairs.append((a.strip(), b.strip()))
    return pairs


def _load_data(path):
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return load_dataset(path)


def _load_model(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _check_site(dataset, site_id):
    if site_id not in dataset.site_ids() and not any(
            r.site_id == site_id for r in dataset.train + dataset.test):
        raise ContrastMismatchError(f"site {site_id!r} not present in dataset")


def _write(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    config = _read_config(args.config)
    seed = _setting(args, config, "seed", 0, int)
    subjects = _setting(args, config, "subjects", 3, int)
    slices = _setting(args, config, "slices", 4, int)
    travel = _setting(args, config, "travel", 4, int)
    size = _setting(args, config, "size", 64, int)
    noise_rel = _setting(args, config, "noise_rel", 0.01, float)
    bias = _setting(args, config, "bias_amplitude", 0.1, float)
    roster = default_roster(noise_rel=noise_rel, bias_amplitude=bias)
    known = [c.site_id for c in roster]
    if args.sites:
        wanted = _parse_sites(args.sites)
        unknown = [s for s in wanted if s not in known]
        if unknown:
            raise ContrastMismatchError(
                f"unknown roster sites {unknown}, available: {sorted(set(known))}")
        roster = [c for c in roster if c.site_id in wanted]
    pairs = _parse_pairs(args.travel_pairs) if args.travel_pairs else None
    travel_slices = _setting(args, config, "travel_slices", None, int)
    dataset = make_dataset(roster, subjects, slices, travel,
                           rng_seed=stream_seed(seed, "data"),
                           size=(size, size), travel_pairs=pairs,
                           n_travel_slices=travel_slices)
    save_dataset(dataset, args.out_dir)
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test "
          f"images to {args.out_dir}")
    return EXIT_OK


def cmd_train(args):
    config = _read_config(args.config)
    dataset = _load_data(args.data_dir)
    sites = (_parse_sites(args.sites) if args.sites
             else _parse_sites(config["sites"]) if "sites" in config
             else dataset.site_ids())
    for s in sites:
        _check_site(dataset, s)
    cfg = TrainConfig(
        sites=sites,
        reference_site=_setting(args, config, "reference_site", sites[0]),
        lambda_recon=_setting(args, config, "lambda_recon", 10.0, float),
        lambda_perceptual=_setting(args, config, "lambda_perceptual", 0.1, float),
        lambda_kl=_setting(args, config, "lambda_kl", 0.1, float),
        lambda_beta_sim=_setting(args, config, "lambda_beta_sim", 0.1, float),
        lambda_adv=_setting(args, config, "lambda_adv", 0.5, float),
        lr_generator=_setting(args, config, "lr_generator", 2e-4, float),
        lr_discriminator=_setting(args, config, "lr_discriminator", 1e-4, float),
        epochs=_setting(args, config, "epochs", 30, int),
        batch_per_site=_setting(args, config, "batch_per_site", 2, int),
        temperature_start=_setting(args, config, "temperature_start", 1.0, float),
        temperature_end=_setting(args, config, "temperature_end", 0.3, float),
        seed=_setting(args, config, "seed", 0, int),
        width=_setting(args, config, "width", 16, int),
    )
    result = train(dataset, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    meta = {
        "sites": cfg.sites, "reference_site": cfg.reference_site,
        "lambda": {"recon": cfg.lambda_recon, "perceptual": cfg.lambda_perceptual,
                   "kl": cfg.lambda_kl, "beta_sim": cfg.lambda_beta_sim,
                   "adv": cfg.lambda_adv},
        "temperature": [cfg.temperature_start, cfg.temperature_end],
        "epochs": cfg.epochs, "seed": cfg.seed,
    }
    save_checkpoint(os.path.join(args.out_dir, "checkpoint.mrh"),
                    result.model, meta)
    _write(os.path.join(args.out_dir, "loss_log.csv"),
           loss_log_csv(result.step_log))
    print(f"trained {cfg.epochs} epochs ({result.model.step_count} steps), "
          f"checkpoint in {args.out_dir}")
    return EXIT_OK


def _direction(dataset, text):
    if ":" not in text:
        raise ValueError(f"bad direction {text!r}, expected SRC:DST")
    src, _, dst = text.partition(":")
    _check_site(dataset, src)
    _check_site(dataset, dst)
    return src, dst


def cmd_harmonize(args):
    config = _read_config(args.config)
    contrast = _setting(args, config, "contrast", 1, int)
    dataset = _load_data(args.data_dir)
    model, _ = _load_model(args.checkpoint)
    src, dst = _direction(dataset, args.direction)
    dst_imgs = dataset.records(split="test", site_id=dst, contrast_id=contrast)
    if not dst_imgs:
        raise ContrastMismatchError(
            f"no test images for target {dst} contrast {contrast}")
    profile = site_theta(model, dst_imgs)
    sources = dataset.records(split="test", site_id=src, contrast_id=contrast)
    if not sources:
        raise ContrastMismatchError(
            f"no test images for source {src} contrast {contrast}")
    os.makedirs(args.out_dir, exist_ok=True)
    prov = ["source_path,source_site,target_site,theta1,theta2"]
    for rec in sources:
        out = harmonize(model, rec, profile)
        rel = f"{rec.subject_id}_k{rec.slice_index:02d}_c{contrast}.f64"
        arr = np.ascontiguousarray(out.pixels, dtype="<f8")
        with open(os.path.join(args.out_dir, rel), "wb") as fh:
            fh.write(arr.tobytes())
        prov.append(f"{rel},{src},{dst},{profile.mean[0]:.10g},"
                    f"{profile.mean[1]:.10g}")
    _write(os.path.join(args.out_dir, "provenance.csv"), "\n".join(prov) + "\n")
    print(f"harmonized {len(sources)} images {src}->{dst} into {args.out_dir}")
    return EXIT_OK


def cmd_adapt(args):
    config = _read_config(args.config)
    dataset = _load_data(args.data_dir)
    model, meta = _load_model(args.checkpoint)
    _check_site(dataset, args.site)
    cfg = AdaptationConfig(
        k_last=_setting(args, config, "k_last", 2, int),
        epochs=_setting(args, config, "epochs", 10, int),
        lr=_setting(args, config, "lr", 2e-4, float),
        lambda_recon=_setting(args, config, "lambda_recon", 10.0, float),
        lambda_perceptual=_setting(args, config, "lambda_perceptual", 0.1, float),
        lambda_kl=_setting(args, config, "lambda_kl", 0.1, float),
        lambda_beta_sim=_setting(args, config, "lambda_beta_sim", 0.1, float),
        lambda_adv=_setting(args, config, "lambda_adv", 1.0, float),
        batch_per_site=_setting(args, config, "batch_per_site", 2, int),
        temperature=_setting(args, config, "temperature", 0.3, float),
        seed=_setting(args, config, "seed", 0, int),
    )
    adapted = adapt_to_new_site(model, dataset, args.site, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    meta = dict(meta)
    meta["adapted_site"] = args.site
    meta["adapt_epochs"] = cfg.epochs
    save_checkpoint(os.path.join(args.out_dir, "checkpoint.mrh"), adapted, meta)
    print(f"adapted to {args.site} ({cfg.epochs} epochs), "
          f"checkpoint in {args.out_dir}")
    return EXIT_OK


def cmd_eval(args):
    config = _read_config(args.config)
    contrast = _setting(args, config, "contrast", 1, int)
    seed = _setting(args, config, "seed", 0, int)
    dataset = _load_data(args.data_dir)
    model, _ = _load_model(args.checkpoint)
    directions = [_direction(dataset, d)
                  for d in args.direction.split(",") if d.strip()]
    records, tests = evaluate_harmonization(
        model, dataset, directions, contrast_id=contrast,
        seed=stream_seed(seed, "eval"))
    os.makedirs(args.out_dir, exist_ok=True)
    _write(os.path.join(args.out_dir, "metrics.csv"), records_to_csv(records))
    _write(os.path.join(args.out_dir, "tests.csv"), tests_to_csv(tests))
    summary = summary_table(records)
    _write(os.path.join(args.out_dir, "summary.txt"), summary)
    print(summary, end="")
    return EXIT_OK


def cmd_export_theta(args):
    config = _read_config(args.config)
    contrast = _setting(args, config, "contrast", 1, int)
    dataset = _load_data(args.data_dir)
    model, _ = _load_model(args.checkpoint)
    os.makedirs(args.out_dir, exist_ok=True)
    _write(os.path.join(args.out_dir, "theta.csv"),
           theta_csv(model, dataset, contrast_id=contrast))
    print(f"wrote theta.csv to {args.out_dir}")
    return EXIT_OK


def cmd_render_figure(args):
    config = _read_config(args.config)
    contrast = _setting(args, config, "contrast", 1, int)
    dataset = _load_data(args.data_dir)
    model, _ = _load_model(args.checkpoint)
    targets = (_parse_sites(args.targets) if args.targets
               else dataset.site_ids()[:1])
    profiles = []
    for sid in targets:
        _check_site(dataset, sid)
        imgs = dataset.records(split="test", site_id=sid, contrast_id=contrast)
        if not imgs:
            raise ContrastMismatchError(
                f"no test images for target {sid} contrast {contrast}")
        profiles.append(site_theta(model, imgs))
    os.makedirs(args.out_dir, exist_ok=True)
    grid = harmonization_grid(model, dataset, profiles, contrast_id=contrast)
    write_pgm(os.path.join(args.out_dir, "harmonization_grid.pgm"), grid)
    scatter = theta_scatter(model, dataset, contrast_id=contrast)
    write_pgm(os.path.join(args.out_dir, "theta_scatter.pgm"), scatter)
    print(f"wrote harmonization_grid.pgm and theta_scatter.pgm to {args.out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="mrharm",
        description="Synthetic multi-site MR harmonization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, checkpoint=False, data=False, out=True, config=True):
        if config:
            p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="master random seed")
        if data:
            p.add_argument("--data-dir", required=True,
                           help="dataset directory (read-only)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="model checkpoint path")
        if out:
            p.add_argument("--out-dir", required=True,
                           help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--sites", help="comma list of roster site ids")
    p.add_argument("--subjects", type=int, help="training subjects per site")
    p.add_argument("--slices", type=int, help="slices per subject")
    p.add_argument("--travel", type=int, help="traveling subjects per pair")
    p.add_argument("--travel-pairs", help="site pairs, e.g. siteA:siteB,siteC:siteD")
    p.add_argument("--travel-slices", type=int,
                   help="slices per traveling subject (default: --slices)")
    p.add_argument("--size", type=int, help="square image size (default 64)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the harmonization model")
    common(p, data=True)
    p.add_argument("--sites", help="comma list of sites to train on")
    p.add_argument("--reference-site", help="one-class reference site")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("harmonize", help="harmonize test images to a target site")
    common(p, checkpoint=True, data=True)
    p.add_argument("--direction", required=True, help="SRC:DST site pair")
    p.add_argument("--contrast", type=int, help="contrast id (1 or 2)")
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("adapt", help="fine-tune encoder tails on a new site")
    common(p, checkpoint=True, data=True)
    p.add_argument("--site", required=True, help="new site id")
    p.add_argument("--epochs", type=int, help="fine-tune epochs")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="score harmonization against ground truth")
    common(p, checkpoint=True, data=True)
    p.add_argument("--direction", required=True,
                   help="comma list of SRC:DST directions")
    p.add_argument("--contrast", type=int, help="contrast id (1 or 2)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-theta", help="dump contrast codes as CSV")
    common(p, checkpoint=True, data=True)
    p.add_argument("--contrast", type=int, help="contrast id (1 or 2)")
    p.set_defaults(func=cmd_export_theta)

    p = sub.add_parser("render-figure", help="emit grayscale figure files")
    common(p, checkpoint=True, data=True)
    p.add_argument("--targets", help="comma list of harmonization target sites")
    p.add_argument("--contrast", type=int, help="contrast id (1 or 2)")
    p.set_defaults(func=cmd_render_figure)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error[{EXIT_MISSING}]: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"error[{EXIT_CORRUPT}]: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except ContrastMismatchError as exc:
        print(f"error[{EXIT_MISMATCH}]: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except TrainingDiverged as exc:
        print(f"error[{EXIT_DIVERGED}]: {exc} "
              f"(last good epoch {exc.last_good_epoch})", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error[{EXIT_INVALID}]: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # pragma: no cover - safety net
        print(f"error[{EXIT_UNEXPECTED}]: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_UNEXPECTED


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
