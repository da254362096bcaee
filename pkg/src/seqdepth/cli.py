"""Command-line entry point: generate | train | eval | simulate | gradcheck.

Configuration is a flat ``key = value`` text file with dotted keys
(``train.lr = 0.001``); ``--set key=value`` overrides single keys and
``--dump-defaults`` prints every key with its default. Each command writes
``config.txt`` (the fully resolved configuration) next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import avoidsim, gradcheck, scenegen
from .errors import (
    CheckpointError,
    DatasetError,
    GradientContractError,
    InvalidConfigError,
    NumericalError,
    SimulationError,
)
from .metrics import write_report
from .network import NetworkConfig
from .training import (
    TrainConfig,
    evaluate_episodes,
    init_train_state,
    load_checkpoint,
    read_loss_csv,
    save_checkpoint,
    train,
    write_loss_csv,
)

log = logging.getLogger("seqdepth")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

COMMANDS = ("generate", "train", "eval", "simulate", "gradcheck")
CHECKPOINT_NAME = "checkpoint.sqd"

_gen = scenegen.GeneratorConfig()
_net = NetworkConfig()
_train = TrainConfig()
_policy = avoidsim.PolicyParams()
_vehicle = avoidsim.VehicleParams()

# key -> (type, default)
DEFAULTS = {
    "generator.n_train": (int, _gen.n_train),
    "generator.n_test": (int, _gen.n_test),
    "generator.frames": (int, _gen.frames),
    "generator.height": (int, _gen.height),
    "generator.width": (int, _gen.width),
    "generator.altitude": (float, _gen.altitude),
    "generator.fov_deg": (float, _gen.fov_deg),
    "generator.max_range": (float, _gen.max_range),
    "generator.n_boxes": (int, _gen.n_boxes),
    "generator.val_fraction": (float, _gen.val_fraction),
    "generator.seed": (int, _gen.seed),
    "network.width_scale": (float, _net.width_scale),
    "network.lrelu_variant": (str, _net.lrelu_variant),
    "network.alpha": (float, _net.alpha),
    "network.init": (str, _net.init),
    "network.update_gate_bias": (float, _net.update_gate_bias),
    "train.seq_len": (int, _train.seq_len),
    "train.burn_len": (int, _train.burn_len),
    "train.epochs": (float, _train.epochs),
    "train.max_updates": (int, 0),  # 0 = derive from epochs
    "train.lr": (float, _train.lr),
    "train.lr_decay": (float, _train.lr_decay),
    "train.lr_decay_every": (int, _train.lr_decay_every),
    "train.batch_sequences": (int, _train.batch_sequences),
    "train.val_every": (int, _train.val_every),
    "train.checkpoint_every": (int, 500),
    "train.seed": (int, _train.seed),
    "eval.split": (str, "test"),
    "sim.trials": (int, 30),
    "sim.seed": (int, 0),
    "sim.stop_threshold": (int, _policy.stop_threshold),
    "sim.speed": (float, _vehicle.speed),
    "sim.dt": (float, _vehicle.dt),
    "sim.turn_rate_deg": (float, math.degrees(_vehicle.turn_rate)),
    "sim.radius": (float, _vehicle.radius),
    "sim.altitude": (float, _gen.altitude),
    "sim.fov_deg": (float, _gen.fov_deg),
    "gradcheck.seed": (int, 0),
    "gradcheck.per_tensor": (int, 8),
    "gradcheck.network": (bool, True),
}
SEED_KEYS = ("generator.seed", "train.seed", "sim.seed", "gradcheck.seed")


def _parse_value(key, text):
    if key not in DEFAULTS:
        raise InvalidConfigError(f"unknown config key {key!r}")
    typ = DEFAULTS[key][0]
    text = text.strip()
    try:
        if typ is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise InvalidConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = _parse_value(key.strip(), val)
    return out


def format_config(values):
    return "".join(f"{k} = {v}\n" for k, v in sorted(values.items()))


def resolve_config(config_path=None, overrides=(), seed=None):
    """Defaults, then the config file, then ``--set`` pairs, then ``--seed``."""
    values = {k: d for k, (_, d) in DEFAULTS.items()}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise InvalidConfigError(f"cannot read config {config_path}: {exc}") from exc
        values.update(parse_config_text(text, str(config_path)))
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = _parse_value(k.strip(), v)
    if seed is not None:
        for k in SEED_KEYS:
            values[k] = seed
    return values


def _section(values, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in values.items() if k.startswith(prefix + ".")}


def generator_config(values):
    return scenegen.GeneratorConfig(**_section(values, "generator"))


def train_config(values, height, width, dataset=None):
    t = _section(values, "train")
    t.pop("checkpoint_every")
    t["max_updates"] = t["max_updates"] or None
    net = NetworkConfig(height=height, width=width, seed=t["seed"], **_section(values, "network"))
    return TrainConfig(network=net, dataset=dataset, **t)


def _echo(out_dir, values, command):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# seqdepth {command}\n" + format_config(values))


def _require_out(args):
    if not args.out:
        raise InvalidConfigError(f"{args.command} needs --out")
    return Path(args.out)


# -- commands -----------------------------------------------------------------------------

def cmd_generate(args, values):
    out = _require_out(args)
    cfg = generator_config(values)
    episodes, splits, kinds = scenegen.generate_dataset(cfg)
    scenegen.write_dataset(episodes, out, splits, extra={**_section(values, "generator"), "kinds": kinds})
    _echo(out, values, "generate")
    log.info("wrote %d episodes to %s", len(episodes), out)
    return {"episodes": len(episodes), "splits": {s: splits.count(s) for s in sorted(set(splits))}}


def _load_dataset(path):
    if not path:
        raise InvalidConfigError("--data is required")
    if not Path(path).is_dir():
        raise DatasetError(f"dataset directory {path} does not exist")
    return scenegen.read_dataset(path)


def cmd_train(args, values):
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    history = []
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        state = ckpt.train_state()
        cfg = state.config
        loss_csv = Path(args.resume).with_name("loss.csv")
        if loss_csv.exists():
            history = [r for r in read_loss_csv(loss_csv) if r["step"] <= state.step]
        state.history = history
        if values["train.max_updates"]:
            state.total_updates = values["train.max_updates"]
        data = _load_dataset(args.data or cfg.dataset)
    else:
        data = _load_dataset(args.data)
        cfg = train_config(values, data.manifest["height"], data.manifest["width"], str(data.root))
        state = None
    train_eps, val_eps = data.split("train"), data.split("val")
    if not train_eps:
        raise DatasetError("dataset has no training episodes")
    if state is None:
        state = init_train_state(cfg, train_eps)
    _echo(out, values, "train")
    every = values["train.checkpoint_every"]

    def on_step(st, row):
        if every and st.step % every == 0:
            save_checkpoint(out / CHECKPOINT_NAME, st)
            write_loss_csv(st.history, out / "loss.csv")

    state = train(cfg, train_eps, val_eps, state=state, on_step=on_step)
    save_checkpoint(out / CHECKPOINT_NAME, state)
    write_loss_csv(state.history, out / "loss.csv")
    first, last = state.history[0]["train_loss"], state.history[-1]["train_loss"]
    log.info("trained to step %d (loss %.3f -> %.3f)", state.step, first, last)
    return {"step": state.step, "first_loss": first, "last_loss": last}


def cmd_eval(args, values):
    out = _require_out(args)
    if not args.checkpoint:
        raise InvalidConfigError("eval needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    data = _load_dataset(args.data or ckpt.config.dataset)
    episodes = data.split(values["eval.split"])
    if not episodes:
        raise DatasetError(f"dataset has no {values['eval.split']!r} episodes")
    out.mkdir(parents=True, exist_ok=True)
    _echo(out, values, "eval")
    extra = {"checkpoint": str(args.checkpoint), "split": values["eval.split"], "step": ckpt.step}
    report = evaluate_episodes(ckpt.net, episodes)
    result = {"recurrent": write_report(report, out / "metrics.json", out / "metrics.csv",
                                        {**extra, "ablate_recurrence": False})}
    if args.ablate_recurrence:
        ablated = evaluate_episodes(ckpt.net, episodes, reset_every_frame=True)
        result["ablated"] = write_report(ablated, out / "metrics_ablated.json",
                                         out / "metrics_ablated.csv", {**extra, "ablate_recurrence": True})
    for name, r in result.items():
        log.info("%s: MSE %.2f AE %.3f RMSLE %.4f", name, r["mse"], r["ae"], r["rmsle"])
    return result


def course_from_config(values, height, width):
    rig = scenegen.CameraRig(values["sim.altitude"], math.radians(values["sim.fov_deg"]), height, width)
    vehicle = avoidsim.VehicleParams(values["sim.speed"], values["sim.dt"],
                                     math.radians(values["sim.turn_rate_deg"]), values["sim.radius"])
    policy = avoidsim.PolicyParams(stop_threshold=values["sim.stop_threshold"])
    return avoidsim.default_course(rig, vehicle, policy)


def cmd_simulate(args, values):
    out = _require_out(args)
    if args.oracle == bool(args.checkpoint):
        raise InvalidConfigError("simulate needs exactly one of --oracle or --checkpoint")
    if args.trials is not None:
        values["sim.trials"] = args.trials
    if args.oracle:
        source = avoidsim.OracleDepth()
        h, w = _gen.height, _gen.width
    else:
        ckpt = load_checkpoint(args.checkpoint)
        source = avoidsim.NetworkDepth(ckpt.net, reset_every_frame=args.ablate_recurrence)
        h, w = ckpt.config.network.height, ckpt.config.network.width
    course = course_from_config(values, h, w)
    _echo(out, values, "simulate")
    summary = avoidsim.run_campaign(course, source, values["sim.trials"], values["sim.seed"], out,
                                    config_echo=values)
    log.info("%d trials: %d finish, %d crash, %d timeout", summary.n_trials, summary.finishes,
             summary.crashes, summary.timeouts)
    return {"finishes": summary.finishes, "crashes": summary.crashes, "timeouts": summary.timeouts}


def cmd_gradcheck(args, values):
    seed = values["gradcheck.seed"]
    if args.inject_fault:
        with gradcheck.inject_fault(args.inject_fault):
            results = gradcheck.run_suite(seed, values["gradcheck.network"], values["gradcheck.per_tensor"])
    else:
        results = gradcheck.run_suite(seed, values["gradcheck.network"], values["gradcheck.per_tensor"])
    rows = [r.to_dict() for r in results]
    for r in rows:
        print(f"{r['name']:<22} {'ok' if r['passed'] else 'FAIL':<4} worst {r['max_rel_error']:.3e} "
              f"(tol {r['tol']:.0e}, {r['checked']} checked, {r['kinks']} kinks)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _echo(out, values, "gradcheck")
        (out / "gradcheck.json").write_text(json.dumps(rows, indent=2))
    failed = [r["name"] for r in rows if not r["passed"]]
    if failed:
        raise GradientContractError(f"gradient check failed for: {', '.join(failed)}")
    return {"passed": len(rows)}


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "simulate": cmd_simulate, "gradcheck": cmd_gradcheck}


def build_parser():
    p = argparse.ArgumentParser(prog="seqdepth", description=__doc__.splitlines()[0])
    p.add_argument("--dump-defaults", action="store_true", help="print every config key and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        s.add_argument("--seed", type=int, help="override every seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--dump-defaults", action="store_true", help="print every config key and exit")
        if name in ("train", "eval"):
            s.add_argument("--data", help="dataset directory")
        if name in ("eval", "simulate"):
            s.add_argument("--checkpoint")
            s.add_argument("--ablate-recurrence", action="store_true",
                           help="reset the recurrent state before every frame")
        if name == "train":
            s.add_argument("--resume", metavar="CHECKPOINT")
        if name == "simulate":
            s.add_argument("--oracle", action="store_true", help="steer with ground-truth depth")
            s.add_argument("--trials", type=int)
        if name == "gradcheck":
            s.add_argument("--inject-fault", help=argparse.SUPPRESS)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dump_defaults:
        sys.stdout.write(format_config({k: d for k, (_, d) in DEFAULTS.items()}))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        values = resolve_config(args.config, args.set, args.seed)
        result = HANDLERS[args.command](args, values)
    except (InvalidConfigError, SimulationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, GradientContractError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
