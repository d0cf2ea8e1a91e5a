"""Command-line front end: train / eval / attack / energy / gradcheck / export-attn.

Configuration is a plain ``key=value`` file (``#`` starts a comment). Keys are
the model fields, the training-recipe fields and the dataset keys below;
``--overrides k=v[,k=v...]`` is applied on top of the file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import adversarial, energy, ltf
from .attention import record_maps
from .data import Dataset, make_toy_dataset, read_cifar10_batches
from .model import ConfigError, ModelConfig, SpiLiFormer, load_checkpoint, model_grad_check, parse_kv
from .tensor import no_grad
from .train import TrainRecipe, evaluate, train_loop

log = logging.getLogger("lidiff")


class UsageError(Exception):
    pass


DATA_KEYS = {"dataset": "blobs", "data_path": "", "n_train": "256", "n_eval": "128", "data_seed": "0"}

# used when no --config is given: the toy blobs problem
TOY_DEFAULTS = {"T": "2", "in_channels": "1", "img_size": "16", "num_classes": "2", "base_channels": "16",
                "stage_depths": "1,1,1"}

# alpha belongs to the model config; the recipe copy is left at "use the model value"
RECIPE_KEYS = [k for k in TrainRecipe.keys() if k != "alpha"]


def valid_keys():
    return ModelConfig.keys() + RECIPE_KEYS + list(DATA_KEYS)


@dataclass
class RunConfig:
    model: ModelConfig
    recipe: TrainRecipe
    data: dict = field(default_factory=dict)


def _split_overrides(text):
    """``a=1,stage_depths=1,1,2,b=3`` -> {'a': '1', 'stage_depths': '1,1,2', 'b': '3'}."""
    out, key = {}, None
    for item in (s.strip() for s in (text or "").split(",")):
        if not item:
            continue
        if "=" in item:
            key, v = item.split("=", 1)
            key = key.strip()
            out[key] = v.strip()
        elif key is not None:
            out[key] += "," + item
        else:
            raise UsageError(f"override {item!r} is not key=value")
    return out


def load_run_config(config_path=None, overrides=None, seed=None):
    kv = dict(TOY_DEFAULTS) if config_path is None else {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        kv.update(parse_kv(path.read_text()))
    kv.update(_split_overrides(overrides))
    known = set(valid_keys())
    unknown = sorted(set(kv) - known)
    if unknown:
        raise UsageError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(valid_keys())}")
    model_kv = {k: v for k, v in kv.items() if k in ModelConfig.keys()}
    recipe_kv = {k: v for k, v in kv.items() if k in RECIPE_KEYS}
    if seed is not None:
        recipe_kv["seed"] = str(seed)
    data = dict(DATA_KEYS)
    data.update({k: v for k, v in kv.items() if k in DATA_KEYS})
    return RunConfig(ModelConfig.from_kv(model_kv), TrainRecipe.from_kv(recipe_kv), data)


def load_datasets(data):
    kind = data["dataset"]
    seed = int(data["data_seed"])
    if kind in ("blobs", "bars"):
        return (make_toy_dataset(kind, int(data["n_train"]), seed=seed),
                make_toy_dataset(kind, int(data["n_eval"]), seed=seed + 1, split="eval"))
    root = Path(data["data_path"])
    if not root.is_dir():
        raise UsageError(f"data_path directory not found: {root}")
    if kind == "cifar10":
        train_files = sorted(root.glob("data_batch_*.bin"))
        if not train_files:
            raise UsageError(f"no data_batch_*.bin files under {root}")
        return read_cifar10_batches(train_files), read_cifar10_batches(root / "test_batch.bin", split="eval")
    if kind == "ltf":
        return Dataset.load_ltf(root / "train"), Dataset.load_ltf(root / "eval")
    raise UsageError(f"unknown dataset {kind!r}; expected blobs, bars, cifar10 or ltf")


def _model(args, rc):
    if args.checkpoint:
        if not Path(args.checkpoint).is_dir():
            raise UsageError(f"checkpoint directory not found: {args.checkpoint}")
        return load_checkpoint(args.checkpoint, seed=rc.recipe.seed)[0]
    return SpiLiFormer(rc.model, seed=rc.recipe.seed)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -------------------------------------------------------------------
def cmd_train(args, rc):
    train, ev = load_datasets(rc.data)
    out = _out_dir(args)
    model = SpiLiFormer(rc.model, seed=rc.recipe.seed)
    history = train_loop(model, train, rc.recipe, ev, csv_path=out / "metrics.csv",
                         checkpoint_dir=out / "checkpoint")
    print(f"final eval accuracy {history[-1]['eval_acc']:.4f}")
    print(f"checkpoint written to {out / 'checkpoint'}")
    return 0


def cmd_eval(args, rc):
    train, ev = load_datasets(rc.data)
    model = _model(args, rc)
    ds = train if args.split == "train" else ev
    acc = evaluate(model, ds, threads=args.threads)
    print(f"{args.split} accuracy {acc:.4f} ({len(ds)} samples)")
    return 0


def cmd_attack(args, rc):
    _, ev = load_datasets(rc.data)
    model = _model(args, rc)
    try:
        eps_list = [float(e) for e in args.eps.split(",")]
    except ValueError:
        raise UsageError(f"--eps expects comma-separated numbers, got {args.eps!r}") from None
    cfgs = [adversarial.AttackConfig(args.kind, e, args.step or max(e / 4, 1e-6), args.iters) for e in eps_list]
    rows = adversarial.robustness_sweep(model, ev, cfgs)
    out = _out_dir(args) / "attack.csv"
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['kind']} eps={r['eps']:.4g} clean={r['clean_acc']:.4f} adversarial={r['adv_acc']:.4f}")
    return 0


def cmd_energy(args, rc):
    _, ev = load_datasets(rc.data)
    model = _model(args, rc)
    model.eval()
    x = ev.inputs[:args.samples]
    report = energy.estimate_energy(energy.record_firing_rates(model, x))
    out = _out_dir(args) / "energy.csv"
    out.write_text(report.to_csv(args.unit))
    print(report.table(args.unit))
    return 0


def cmd_gradcheck(args, rc):
    seed = args.seed if args.seed is not None else 7
    report = model_grad_check(seed=seed, elements=args.elements)
    print(f"max relative error {report.max_rel_error:.3e} over {report.checked} elements")
    if report.worst is not None:
        print(f"worst: {report.worst[0]}[{report.worst[1]}] tape={report.worst[2]:.6g} numeric={report.worst[3]:.6g}")
    return 0 if report.passed else 1


def cmd_export_attn(args, rc):
    _, ev = load_datasets(rc.data)
    model = _model(args, rc)
    model.eval()
    out = _out_dir(args)
    with record_maps() as maps, no_grad():
        model.infer(ev.inputs[:args.samples])
    for name, arr in maps.items():
        ltf.save(out / f"{name}.ltf", arr)
    print(f"wrote {len(maps)} attention maps to {out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "energy": cmd_energy,
            "gradcheck": cmd_gradcheck, "export-attn": cmd_export_attn}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file (default: toy blobs setup)")
    common.add_argument("--checkpoint", help="checkpoint directory written by train")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--overrides", default="", help="k=v[,k=v...] applied after the config file")

    p = _Parser(prog="lidiff", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a model and write metrics + checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    ev.add_argument("--split", choices=("train", "eval"), default="eval")
    at = sub.add_parser("attack", parents=[common], help="FGSM/PGD robustness sweep")
    at.add_argument("--kind", choices=("fgsm", "pgd"), default="fgsm")
    at.add_argument("--eps", default="0,0.05,0.1,0.2", help="comma-separated epsilons in [0, 1] pixel units")
    at.add_argument("--step", type=float, default=None, help="PGD step size (default eps/4)")
    at.add_argument("--iters", type=int, default=10)
    en = sub.add_parser("energy", parents=[common], help="per-layer SOP/energy report")
    en.add_argument("--unit", choices=("pJ", "uJ", "mJ"), default="mJ")
    en.add_argument("--samples", type=int, default=32)
    gc = sub.add_parser("gradcheck", parents=[common], help="tiny-config whole-model gradient check")
    gc.add_argument("--elements", type=int, default=64)
    ex = sub.add_parser("export-attn", parents=[common], help="write attention maps as LTF files")
    ex.add_argument("--samples", type=int, default=4)
    return p


def _setup_logging():
    name = os.environ.get("LIDIFF_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise UsageError(f"LIDIFF_LOG={name!r} is not a log level (DEBUG, INFO, WARNING, ERROR)")
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)


def run(argv=None):
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        rc = load_run_config(args.config, args.overrides, args.seed)
        return COMMANDS[args.command](args, rc)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- reported, not swallowed
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
