"""Command-line surface: train | decode | eval | gradcheck | enumerate-oracle.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from typing import Optional, Sequence

import numpy as np
import torch

from . import data as data_mod
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_from_states,
    load_checkpoint,
    model_state_from_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_run_config, run_config_from_dict, run_config_to_dict
from .core import Vocabulary, VocabularyError, build_vocabulary
from .data import DataError, ExamplePair, encode_pairs
from .inference import DecodeConfig, DecodeError, decode, exact_match, format_source_tree, make_root_split_filter
from .model import LatentQcfgModel, copy_token_map
from .numerics import NumericsError
from .qcfg import QcfgError, SamplingError, SamplingLimits, format_derivation
from .training import TrainingError, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise CliUsageError(message)


class CliUsageError(Exception):
    pass


def build_parser() -> _Parser:
    parser = _Parser(prog="latent-qcfg", description="Latent-tree grammar transduction")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--split", help="override the dataset split")
        p.add_argument("--checkpoint", help="checkpoint path override")

    p_train = sub.add_parser("train", help="train a model and save the best checkpoint")
    common(p_train)
    p_train.add_argument("--log", help="training log path override")

    for name in ("decode", "eval"):
        p = sub.add_parser(name, help=f"{name} over a file of pairs")
        common(p)
        p.add_argument("--input", help="SCAN-format file to read; defaults to the split's test set")
        p.add_argument("--output", help="prediction dump path (default stdout)")
        p.add_argument("--K", type=int, help="override the decode sample count")
        p.add_argument(
            "--filters",
            choices=["none", "root-split"],
            help="decode filter set override",
        )

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--dim", type=int, default=16)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--coords", type=int, default=4, help="sampled coordinates per parameter")

    p_enum = sub.add_parser("enumerate-oracle", help="compare the charts against brute-force enumeration")
    p_enum.add_argument("--seed", type=int, default=0)
    p_enum.add_argument("--tolerance", type=float, default=1e-6)
    return parser


# --------------------------------------------------------------------------
# Shared plumbing


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
        updates["training"] = dataclasses.replace(config.training, seed=args.seed)
    if getattr(args, "split", None) is not None:
        updates["data"] = dataclasses.replace(config.data, split=args.split)
    if getattr(args, "checkpoint", None) is not None:
        updates["checkpoint_path"] = args.checkpoint
    return dataclasses.replace(config, **updates) if updates else config


def _load_datasets(config: RunConfig) -> tuple[list, list, list]:
    """(train, validation, test) pairs per the data settings."""
    d = config.data
    if d.dataset == "file" or (d.train_path and d.test_path):
        if not d.train_path or not d.test_path:
            raise DataError("file dataset needs train_path and test_path")
        train_pairs = data_mod.load_scan(d.train_path, d.replicate_singletons)
        test_pairs = data_mod.load_scan(d.test_path, d.replicate_singletons)
        val_pairs = test_pairs
    elif d.dataset == "scan":
        train_pairs, test_pairs = data_mod.scan_split(d.split, config.seed)
        if d.split == "simple":
            val_pairs = train_pairs
        else:
            # The simple split's test set stands in for a validation set.
            _, val_pairs = data_mod.scan_split("simple", config.seed)
        if d.replicate_singletons:
            train_pairs = [data_mod.replicate_singleton(p) for p in train_pairs]
            val_pairs = [data_mod.replicate_singleton(p) for p in val_pairs]
            test_pairs = [data_mod.replicate_singleton(p) for p in test_pairs]
    else:  # copy
        train_pairs = data_mod.make_copy_task(2000, config.seed)
        val_pairs = data_mod.make_copy_task(200, config.seed + 1)
        test_pairs = data_mod.make_copy_task(200, config.seed + 2)
    clip = lambda pairs: data_mod.filter_by_length(pairs, d.max_source_length, d.max_target_length)
    return clip(train_pairs), clip(val_pairs), clip(test_pairs)


def _build_model(config: RunConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> LatentQcfgModel:
    m = config.model
    constraints = config.constraints.build(m)
    copy_map = copy_token_map(src_vocab, tgt_vocab) if config.constraints.enable_copy else None
    return LatentQcfgModel(
        src_vocab_size=len(src_vocab),
        tgt_vocab_size=len(tgt_vocab),
        dim=m.dim,
        qcfg_num_nt=m.qcfg_num_nt,
        qcfg_num_pt=m.qcfg_num_pt,
        pcfg_num_nt=m.pcfg_num_nt,
        pcfg_num_pt=m.pcfg_num_pt,
        constraints=constraints,
        use_bilstm=m.use_bilstm,
        use_emphasis=m.use_emphasis,
        copy_map=copy_map,
    )


def _vocab_from_meta(tokens: list, unk_id: int) -> Vocabulary:
    id_to_token = tuple(tokens)
    return Vocabulary(id_to_token, {t: i for i, t in enumerate(id_to_token)}, unk_id)


def _restore(checkpoint: Checkpoint) -> tuple[LatentQcfgModel, RunConfig, Vocabulary, Vocabulary]:
    meta = checkpoint.meta
    config = run_config_from_dict(meta["run_config"])
    src_vocab = _vocab_from_meta(meta["src_vocab"], meta.get("src_unk_id", 0))
    tgt_vocab = _vocab_from_meta(meta["tgt_vocab"], meta.get("tgt_unk_id", 0))
    model = _build_model(config, src_vocab, tgt_vocab)
    model.load_state_dict(model_state_from_checkpoint(checkpoint))
    return model, config, src_vocab, tgt_vocab


def _decode_config(config: RunConfig, args, src_vocab: Vocabulary) -> DecodeConfig:
    d = config.decode
    num_samples = args.K if getattr(args, "K", None) else d.num_samples
    filters = ()
    want_filter = d.use_root_split_filter
    if getattr(args, "filters", None) is not None:
        want_filter = args.filters == "root-split"
    if want_filter:
        conj = [src_vocab.lookup(t) for t in ("and", "after") if t in src_vocab.token_to_id]
        filters = (make_root_split_filter(conj),)
    return DecodeConfig(
        num_samples=num_samples,
        limits=SamplingLimits(d.max_length, d.max_depth, d.max_attempts),
        filters=filters,
        deduplicate=d.deduplicate,
    )


# --------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    config = _load_config(args)
    train_pairs, val_pairs, _ = _load_datasets(config)
    src_vocab = build_vocabulary([p.source for p in train_pairs])
    tgt_vocab = build_vocabulary([p.target for p in train_pairs])
    enc_train = encode_pairs(train_pairs, src_vocab, tgt_vocab)
    enc_val = encode_pairs(val_pairs, src_vocab, tgt_vocab)

    log_path = args.log or config.log_path
    log_handle = open(log_path, "w", encoding="utf-8") if log_path else None

    def log(line: str) -> None:
        if log_handle:
            log_handle.write(line + "\n")
            log_handle.flush()
        else:
            print(line)

    def factory(seed: int) -> LatentQcfgModel:
        torch.manual_seed(seed)
        return _build_model(config, src_vocab, tgt_vocab)

    # The top-level seed governs the whole run.
    train_config = dataclasses.replace(config.training, seed=config.seed)
    try:
        model, result = train(factory, enc_train, enc_val, train_config, log)
    finally:
        if log_handle:
            log_handle.close()
    meta = {
        "run_config": run_config_to_dict(config),
        "src_vocab": list(src_vocab.id_to_token),
        "tgt_vocab": list(tgt_vocab.id_to_token),
        "src_unk_id": src_vocab.unk_id,
        "tgt_unk_id": tgt_vocab.unk_id,
        "best_metric": result.best_metric,
        "best_epoch": result.best_epoch,
        "seed": result.seed,
    }
    save_checkpoint(
        config.checkpoint_path,
        checkpoint_from_states(model.state_dict(), meta, result.best_optimizer_state),
    )
    print(f"saved {config.checkpoint_path} (validation {result.best_metric:.4f}, epoch {result.best_epoch})")
    return EXIT_OK


def _run_inference(args, evaluate: bool) -> int:
    config = _load_config(args)
    checkpoint = load_checkpoint(args.checkpoint or config.checkpoint_path)
    model, saved_config, src_vocab, tgt_vocab = _restore(checkpoint)
    if args.split:
        saved_config = dataclasses.replace(
            saved_config, data=dataclasses.replace(saved_config.data, split=args.split)
        )
    if args.input:
        pairs = data_mod.load_scan(args.input, saved_config.data.replicate_singletons)
    else:
        _, _, pairs = _load_datasets(saved_config)
    dec = _decode_config(saved_config, args, src_vocab)
    rng = np.random.default_rng(saved_config.seed)
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    predictions, references = [], []
    try:
        for pair in pairs:
            x = src_vocab.encode(pair.source)
            y = tgt_vocab.encode(pair.target)
            references.append(y)
            try:
                result = decode(model, x, dec, rng)
            except (DecodeError, QcfgError, SamplingError):
                predictions.append(())
                out.write(f"{' '.join(pair.source)}\t{' '.join(pair.target)}\t\tinf\t\t\n")
                continue
            predictions.append(result.best_yield)
            out.write(
                "\t".join(
                    [
                        " ".join(pair.source),
                        " ".join(pair.target),
                        " ".join(tgt_vocab.decode(result.best_yield)),
                        f"{result.best_perplexity:.6g}",
                        format_source_tree(result.source_tree, src_vocab.token),
                        format_derivation(result.best_derivation, tgt_vocab.token),
                    ]
                )
                + "\n"
            )
    finally:
        if out is not sys.stdout:
            out.close()
    if evaluate:
        print(f"exact_match={exact_match(predictions, references):.4f} examples={len(references)}")
    return EXIT_OK


def cmd_decode(args) -> int:
    return _run_inference(args, evaluate=False)


def cmd_eval(args) -> int:
    return _run_inference(args, evaluate=True)


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradient_suites

    results = run_gradient_suites(dim=args.dim, seed=args.seed, max_coords_per_param=args.coords)
    failed = False
    for name, err in results.items():
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{name}: max relative error {err:.3e} [{status}]")
        failed |= err > args.tolerance
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_enumerate_oracle(args) -> int:
    from .gradcheck import run_oracle_comparisons

    results = run_oracle_comparisons(seed=args.seed)
    failed = False
    for name, err in results.items():
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{name}: max abs log-marginal gap {err:.3e} [{status}]")
        failed |= err > args.tolerance
    return EXIT_NUMERIC if failed else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    commands = {
        "train": cmd_train,
        "decode": cmd_decode,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "enumerate-oracle": cmd_enumerate_oracle,
    }
    try:
        return commands[args.command](args)
    except (ConfigError, DataError, VocabularyError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, TrainingError, DecodeError, SamplingError, QcfgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
