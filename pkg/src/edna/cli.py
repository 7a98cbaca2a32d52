"""``edna`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .builtins import default_registry
from .config import (ConfigLayerStack, canonical_text, diff, dump_yaml, effective_config,
                     load_stack)
from .core import apply, deploy, load_components, run_chain, train
from .errors import EdnaError
from .storage import Category, LocalFileBackend


def _stack(args, extra: dict | None = None, origin: str = "cli") -> ConfigLayerStack:
    stack = load_stack(args.config)
    layers = []
    if getattr(args, "seed", None) is not None:
        layers.append(("cli:--seed", {"EXECUTION": {"SEED": args.seed}}))
    if extra:
        layers.append((origin, extra))
    if layers:
        stack = stack + ConfigLayerStack.from_texts([(o, canonical_text(d)) for o, d in layers])
    return stack


def _registry(args):
    registry = default_registry()
    for path in getattr(args, "add", None) or []:
        load_components(path, registry)
    return registry


def cmd_validate(args) -> int:
    cfg = effective_config(_stack(args))
    sys.stdout.write(dump_yaml(cfg.doc))
    print(f"# config hash {cfg.hexdigest}")
    return 0


def cmd_plan(args) -> int:
    a = effective_config(load_stack(args.config))
    b = effective_config(load_stack(args.against))
    changes = diff(a, b)
    for path, old, new in changes:
        print(f"{path}: {old!r} -> {new!r}")
    if not changes:
        print("no changes")
    return 0


def _report_checkpoints(result) -> None:
    for key in result.checkpoints:
        print(f"checkpoint {key}")
    for key in result.plugin_keys:
        print(f"plugin {key}")


def cmd_train(args) -> int:
    plan = apply(_stack(args), _registry(args), storage_root=args.storage_root, mode="train")
    print(f"experiment {plan.key}")
    _report_checkpoints(train(plan, epochs=args.max_epochs))
    return 0


def cmd_resume(args) -> int:
    plan = apply(_stack(args), _registry(args), storage_root=args.storage_root, mode="train")
    print(f"experiment {plan.key}")
    result = train(plan, epochs=args.max_epochs, resume_from=args.checkpoint,
                   allow_config_drift=args.allow_config_drift)
    _report_checkpoints(result)
    return 0


def cmd_deploy(args) -> int:
    extra = {"DEPLOYMENT": {"MODEL_CHECKPOINT": args.checkpoint}} if args.checkpoint else None
    plan = apply(_stack(args, extra, "cli:--checkpoint"), _registry(args),
                 storage_root=args.storage_root, mode="deploy")
    sink = deploy(plan)
    print(f"{len(sink.records)} records -> {Category.ARTIFACT.value}/{sink.key}")
    return 0


def cmd_package(args) -> int:
    plan = apply(_stack(args), _registry(args), storage_root=args.storage_root)
    print(plan.provenance_key)
    return 0


def cmd_chain(args) -> int:
    statuses = run_chain(args.manifest, _registry(args), storage_root=args.storage_root)
    for status in statuses.values():
        line = f"{status.name}: {status.state} (runs={status.runs})"
        if status.error:
            line += f" {status.error}"
        print(line)
    return 0 if all(s.ok for s in statuses.values()) else 1


def cmd_inspect(args) -> int:
    backend = LocalFileBackend("inspect", args.storage_root)
    categories = [Category.parse(args.category)] if args.category else list(Category)
    for category in categories:
        for key in backend.list(category, args.prefix or ""):
            print(f"{category.value}\t{key}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edna", description="Declarative ML pipelines.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("-c", "--config", action="append", required=required, default=None,
                       help="config layer, repeat in merge order")
        p.add_argument("-a", "--add", action="append", metavar="FILE",
                       help="python file with tagged components")
        p.add_argument("--storage-root", default="./edna_store")

    p = sub.add_parser("validate", help="print the effective config")
    with_config(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", help="diff two layer stacks")
    with_config(p)
    p.add_argument("--against", action="append", required=True)
    p.set_defaults(func=cmd_plan)

    for name, func, help_text in (("train", cmd_train, "train from scratch"),
                                  ("resume", cmd_resume, "continue from a checkpoint")):
        p = sub.add_parser(name, help=help_text)
        with_config(p)
        p.add_argument("--seed", type=int)
        p.add_argument("--max-epochs", type=int, help="stop after this many epochs")
        if name == "resume":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--allow-config-drift", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("deploy", help="run the deployment loop")
    with_config(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_deploy)

    p = sub.add_parser("package", help="write the provenance bundle")
    with_config(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_package)

    p = sub.add_parser("chain", help="run a chain manifest")
    p.add_argument("-m", "--manifest", required=True)
    p.add_argument("-a", "--add", action="append", metavar="FILE")
    p.add_argument("--storage-root", default="./edna_store")
    p.set_defaults(func=cmd_chain)

    p = sub.add_parser("inspect", help="list stored keys")
    p.add_argument("--storage-root", required=True)
    p.add_argument("--category")
    p.add_argument("--prefix")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EdnaError as exc:
        print(f"edna: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"edna: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("edna: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
