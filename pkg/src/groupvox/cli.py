"""Command-line entry point: gen-data, train, infer, chat, eval, latency.

Exit codes: 0 success, 1 usage, 2 config, 3 runtime. Diagnostics go to stderr.
Effective settings are resolved as flags > ``--config`` JSON > defaults and
written to ``<out>/config.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from . import plotting
from .data import gen_corpus, read_corpus, write_corpus, corpus_stats
from .decoding import (DecodeConfig, ToyVocoder, stream_decode, first_packet_steps,
                       write_packet_trace, write_waveform)
from .metrics import MODES, evaluate, read_manifest
from .model import LITERAL, ModelConfig, load_checkpoint
from .session import DialogueSession, TurnRejected, write_transcript
from .training import TrainConfig, train
from .vocab import JointVocabulary, ToyCodec

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


DEFAULTS = {
    "gen-data": {"records": 5000, "mix": "echo=1.0", "min_len": 1, "max_len": 4, "seed": 0,
                 "text_size": 64, "audio_size": 256},
    "train": {"corpus": None, "steps": 1500, "peak_lr": 1e-3, "warmup": 100, "batch_size": 24,
              "lambda_text": 1.0, "lambda_audio": 1.0, "mode": "s2s", "validate_every": 300,
              "val_fraction": 0.01, "weight_decay": 0.01, "seed": 0, "group_size": 3, "layers": 2,
              "model_dim": 128, "heads": 4, "max_positions": 128, "text_size": 64, "audio_size": 256,
              "group_head_mode": LITERAL},
    "infer": {"checkpoint": None, "user": None, "speaker": None, "chunk": 30,
              "repetition_penalty": 1.2, "max_steps": 64, "seed": 0},
    "chat": {"checkpoint": None, "script": None, "rounds": None, "no_cache": False,
             "repetition_penalty": 1.2, "max_steps": 64, "seed": 0},
    "eval": {"manifest": None, "mode": None, "codec_rate": 15, "codec_seed": 0,
             "text_size": 64, "audio_size": 256, "seed": 0},
    "latency": {"chunk": "30", "groups": "1,2,3,4,5"},
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="groupvox", description="Toy grouped speech-text dialogue model.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", help="JSON file of option values")
        s.add_argument("--out", help="run directory")
        return s

    # defaults are None so explicit flags can be told apart from config values
    s = cmd("gen-data", "write a synthetic dialogue corpus")
    s.add_argument("--records", type=int)
    s.add_argument("--mix", help="task weights, e.g. echo=0.5,transform=0.5")
    s.add_argument("--min-len", type=int)
    s.add_argument("--max-len", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--text-size", type=int)
    s.add_argument("--audio-size", type=int)

    s = cmd("train", "train a model on a corpus")
    s.add_argument("--corpus")
    s.add_argument("--steps", type=int)
    s.add_argument("--peak-lr", type=float)
    s.add_argument("--warmup", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lambda-text", type=float)
    s.add_argument("--lambda-audio", type=float)
    s.add_argument("--mode", choices=["s2s", "asr", "tts"])
    s.add_argument("--validate-every", type=int)
    s.add_argument("--val-fraction", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--group-size", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--model-dim", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--max-positions", type=int)
    s.add_argument("--text-size", type=int)
    s.add_argument("--audio-size", type=int)
    s.add_argument("--group-head-mode")

    s = cmd("infer", "answer one spoken user turn")
    s.add_argument("--checkpoint")
    s.add_argument("--user", help="user text token ids, space separated; spoken via the toy codec")
    s.add_argument("--speaker", type=int, help="also write a toy waveform for this speaker")
    s.add_argument("--chunk", type=int)
    s.add_argument("--repetition-penalty", type=float)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--seed", type=int)

    s = cmd("chat", "run a scripted multi-round dialogue")
    s.add_argument("--checkpoint")
    s.add_argument("--script", help="one user turn per line, text token ids; '-' reads stdin")
    s.add_argument("--rounds", type=int)
    s.add_argument("--no-cache", action="store_true", default=None)
    s.add_argument("--repetition-penalty", type=float)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--seed", type=int)

    s = cmd("eval", "score an evaluation manifest")
    s.add_argument("--manifest")
    s.add_argument("--mode", choices=list(MODES))
    s.add_argument("--codec-rate", type=int)
    s.add_argument("--codec-seed", type=int)
    s.add_argument("--text-size", type=int)
    s.add_argument("--audio-size", type=int)
    s.add_argument("--seed", type=int)

    s = cmd("latency", "print steps-to-first-packet for chunk sizes and group sizes")
    s.add_argument("--chunk", help="comma-separated chunk sizes")
    s.add_argument("--groups", help="comma-separated group sizes")
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        unknown = set(from_file) - set(cfg)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        cfg.update(from_file)
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


def _ints(text, what) -> list[int]:
    try:
        vals = [int(t) for t in str(text).replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"{what}: expected integers, got {text!r}") from exc
    if not vals:
        raise ConfigError(f"{what}: empty")
    return vals


def _need_file(cfg, key) -> Path:
    if cfg[key] is None:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    path = Path(cfg[key])
    if not path.is_file():
        raise ConfigError(f"{key} not found: {path}")
    return path


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": args.command, **cfg}, indent=2, sort_keys=True) + "\n")
    return out


def _decode_cfg(cfg) -> DecodeConfig:
    try:
        return DecodeConfig(repetition_penalty=cfg["repetition_penalty"],
                            max_response_steps=cfg["max_steps"], chunk_size=cfg.get("chunk", 30))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load(path):
    model, mcfg, _, _ = load_checkpoint(path)
    return model, mcfg


# subcommands ------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    mix = {}
    for part in str(cfg["mix"]).split(","):
        name, _, w = part.partition("=")
        try:
            mix[name.strip()] = float(w)
        except ValueError as exc:
            raise ConfigError(f"bad mix entry {part!r}") from exc
    try:
        vocab = JointVocabulary(cfg["text_size"], cfg["audio_size"])
        records = gen_corpus(cfg["records"], mix, vocab, cfg["seed"], cfg["min_len"], cfg["max_len"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args, cfg)
    write_corpus(out / "corpus.jsonl", records)
    stats = corpus_stats(records)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in stats.items():
        w.writerow([k, json.dumps(v)])
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    corpus_path = _need_file(cfg, "corpus")
    try:
        vocab = JointVocabulary(cfg["text_size"], cfg["audio_size"])
        mcfg = ModelConfig(layers=cfg["layers"], model_dim=cfg["model_dim"], heads=cfg["heads"],
                           max_positions=cfg["max_positions"], group_size=cfg["group_size"],
                           vocab=vocab, group_head_mode=cfg["group_head_mode"], init_seed=cfg["seed"])
        tcfg = TrainConfig(peak_lr=cfg["peak_lr"], warmup_steps=cfg["warmup"], total_steps=cfg["steps"],
                           batch_size=cfg["batch_size"], lambda_text=cfg["lambda_text"],
                           lambda_audio=cfg["lambda_audio"], mode=cfg["mode"],
                           weight_decay=cfg["weight_decay"], validate_every=cfg["validate_every"],
                           val_fraction=cfg["val_fraction"], seed=cfg["seed"])
        records = read_corpus(corpus_path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args, cfg)
    result = train(tcfg, mcfg, records, out_dir=out)
    plotting.plot_losses(result.metrics, out / "loss.png")
    last = result.metrics[-1]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["steps", "best_step", "best_val_loss", "final_loss_text", "final_loss_audio", "checkpoint"])
    w.writerow([last["step"], result.best_step, f"{result.best_val_loss:.6f}",
                f"{last['loss_text']:.6f}", f"{last['loss_audio']:.6f}", result.checkpoint])
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    ckpt = _need_file(cfg, "checkpoint")
    if cfg["user"] is None:
        raise UsageError("--user is required")
    user = _ints(cfg["user"], "user")
    dcfg = _decode_cfg(cfg)
    model, mcfg = _load(ckpt)
    V = mcfg.vocab
    if any(not (V.first_text_content <= t < V.text_size) for t in user):
        raise ConfigError(f"user tokens must lie in [{V.first_text_content}, {V.text_size})")
    out = _out_dir(args, cfg)
    session = DialogueSession(model, decode_cfg=dcfg)
    speech = session.codec.encode(user)
    prompt = session.build_prompt(speech)
    res = stream_decode(prompt, model, dcfg)
    pair = res.pair
    (out / "response.json").write_text(json.dumps(
        {"text": pair.text, "audio": pair.audio, "steps": pair.steps, "truncated": pair.truncated}) + "\n")
    write_packet_trace(out / "packets.jsonl", res.packets)
    if cfg["speaker"] is not None and pair.audio:
        voc = ToyVocoder(V.text_size, V.audio_size)
        write_waveform(out / "response.wav.bin", voc.synthesize(pair.audio, cfg["speaker"]), voc.sample_rate)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["text", "audio_tokens", "steps", "packets", "truncated"])
    w.writerow([" ".join(map(str, pair.text)), len(pair.audio), pair.steps, len(res.packets), pair.truncated])
    return EXIT_OK


def cmd_chat(args, cfg) -> int:
    ckpt = _need_file(cfg, "checkpoint")
    if cfg["script"] is None:
        raise UsageError("--script is required")
    if cfg["script"] == "-":
        lines = sys.stdin.read().splitlines()
    else:
        lines = _need_file(cfg, "script").read_text().splitlines()
    turns = [_ints(ln, "script line") for ln in lines if ln.strip()]
    if cfg["rounds"] is not None:
        if cfg["rounds"] < 1:
            raise ConfigError("--rounds must be >= 1")
        if cfg["rounds"] > len(turns):
            raise ConfigError(f"--rounds {cfg['rounds']} but the script has {len(turns)} turns")
        turns = turns[: cfg["rounds"]]
    dcfg = _decode_cfg(cfg)
    model, _ = _load(ckpt)
    out = _out_dir(args, cfg)
    session = DialogueSession(model, decode_cfg=dcfg, use_cache=not cfg["no_cache"])
    results = []
    for user in turns:
        try:
            results.append(session.run_turn(session.codec.encode(user)))
        except (TurnRejected, ValueError) as exc:
            print(f"turn {session.round_index} rejected: {exc}", file=sys.stderr)
    write_transcript(out / "transcript.jsonl", results)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["round", "user", "assistant", "reuse_len", "steps"])
    for r in results:
        w.writerow([r.round, " ".join(map(str, r.user_text)), " ".join(map(str, r.reply.text)),
                    r.reuse_len, r.reply.steps])
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    manifest = _need_file(cfg, "manifest")
    try:
        samples = read_manifest(manifest)
        codec = ToyCodec(JointVocabulary(cfg["text_size"], cfg["audio_size"]),
                         rate=cfg["codec_rate"], seed=cfg["codec_seed"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{manifest}: {exc}") from exc
    report = evaluate(samples, mode=cfg["mode"], codec=codec)
    out = _out_dir(args, cfg)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    plotting.plot_scores(report.datasets, out / "scores.png", report.overall)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["dataset", "n", "score", "asr_wer"])
    for ds, score in report.datasets.items():
        a = report.asr_wer.get(ds)
        w.writerow([ds, report.n_samples[ds], f"{score:.2f}", "" if a is None else f"{a:.4f}"])
    w.writerow(["overall", sum(report.n_samples.values()), f"{report.overall:.2f}",
                "" if report.overall_asr_wer is None else f"{report.overall_asr_wer:.4f}"])
    return EXIT_OK


def cmd_latency(args, cfg) -> int:
    chunks = _ints(cfg["chunk"], "chunk")
    groups = _ints(cfg["groups"], "groups")
    try:
        rows = [(c, g, first_packet_steps(c, g)) for c in chunks for g in groups]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["chunk", "group_size", "steps"])
    w.writerows(rows)
    if args.out:
        out = _out_dir(args, cfg)
        with open(out / "latency.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows([("chunk", "group_size", "steps"), *rows])
        plotting.plot_latency(rows, out / "latency.png")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "chat": cmd_chat,
            "eval": cmd_eval, "latency": cmd_latency}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help or a parse error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    torch.set_num_threads(1)
    try:
        cfg = resolve(args)
        torch.manual_seed(int(cfg.get("seed") or 0))
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"groupvox {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"groupvox {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything past validation is a runtime failure
        print(f"groupvox {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
