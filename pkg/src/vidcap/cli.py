"""Command line entry point: ``vidcap <command> [options]``.

Every command accepts ``--config PATH`` (a JSON object whose keys are the
command's long option names with dashes or underscores); explicit flags
override file values. Each run writes ``<command>.run-manifest.json`` into its
output directory. Failures print one ``error=<class> message=<text>`` line to
stderr. Exit codes: 0 success, 1 a check suite failed, 2 usage error, 3 any
other failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from importlib import metadata
from pathlib import Path

from . import receptive
from .attention import LAYER_FIRST, ST_FIRST
from .data import CorpusConfig, Corpus, gen_corpus, load_video
from .encoder import EncoderConfig, c3d_stack, pyramid_shapes
from .alignment import default_spec
from .errors import ConfigError, VidcapError
from .fileio import atomic_write_json, atomic_write_text
from .metrics import corpus_bleu
from .model import VARIANTS, CaptionModel
from .suites import SOFT_TOL, hard_suite, soft_gradcheck
from .training import Split, TrainConfig, train

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3


def build_id():
    """Package version plus a digest of the installed sources."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "0"
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"vidcap-{version}-g{h.hexdigest()[:12]}"


class RunRecorder:
    def __init__(self, command, config, out_dir):
        self.command, self.config = command, config
        self.out_dir = Path(out_dir)
        self.outputs = []
        self.started = time.time()

    def output(self, path):
        self.outputs.append(str(path))
        return path

    def write(self, status, **extra):
        manifest = {
            "command": self.command,
            "config": self.config,
            "seeds": {"seed": self.config.get("seed")},
            "build_id": build_id(),
            "timestamps": {"started": self.started, "finished": time.time()},
            "outputs": self.outputs,
            "status": status,
        }
        manifest.update(extra)
        atomic_write_json(self.out_dir / f"{self.command}.run-manifest.json", manifest)


# -- config handling --------------------------------------------------------------
def _effective_config(args, defaults):
    """Defaults, then the JSON config file, then explicitly given flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        for key, value in file_cfg.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise ConfigError(f"{args.config}: unknown config key {key!r} for this command")
            cfg[key] = value
    explicit = {k for k, v in vars(args).items() if v is not None and k not in ("command", "config", "func")}
    for key in explicit:
        cfg[key] = getattr(args, key)
    return cfg


def _add_common(p, out_default="."):
    p.add_argument("--config", metavar="PATH", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR", help=f"output directory (default {out_default})")


# -- commands ---------------------------------------------------------------------
GEN_DEFAULTS = dict(CorpusConfig().to_dict(), out="corpus")


def cmd_gen_data(cfg):
    corpus_cfg = CorpusConfig.from_dict({k: v for k, v in cfg.items() if k in CorpusConfig().to_dict()})
    rec = RunRecorder("gen-data", cfg, cfg["out"])
    manifest = gen_corpus(cfg["out"], corpus_cfg)
    rec.output(Path(cfg["out"]) / "manifest.json")
    sizes = {s: len(v) for s, v in manifest["splits"].items()}
    print(f"wrote corpus to {cfg['out']}: {sizes}, vocabulary of {len(manifest['vocab'])} tokens")
    rec.write("ok")
    return EXIT_OK


TRAIN_DEFAULTS = dict(TrainConfig().to_dict(), data="corpus", out="run", variant="full", divisor=8, fc_size=64,
                      embed_size=32, hidden_size=64, attention_size=32)


def train_config_from(cfg):
    fields = TrainConfig().to_dict()
    return TrainConfig.from_dict({k: cfg[k] for k in fields})


def cmd_train(cfg):
    tcfg = train_config_from(cfg)
    corpus = Corpus(cfg["data"])
    cc = corpus.config
    enc = EncoderConfig(divisor=cfg["divisor"], input_size=(cc.height, cc.width), in_channels=cc.channels,
                        fc_size=cfg["fc_size"])
    model = CaptionModel.create(corpus.vocab, enc, cfg["variant"], cc.n_frames, tcfg.seed,
                                freeze_encoder=tcfg.freeze_encoder, attention_order=tcfg.attention_order,
                                dropout=tcfg.dropout, embed_size=cfg["embed_size"], hidden_size=cfg["hidden_size"],
                                attention_size=cfg["attention_size"])
    out = Path(cfg["out"])
    rec = RunRecorder("train", cfg, out)
    result = train(model, Split(*corpus.load_split("train")), Split(*corpus.load_split("val")), tcfg,
                   out_dir=out, log=print)
    rec.output(out / "checkpoint.vckp")
    rec.output(out / "metrics.csv")
    print(f"best epoch {result.best_epoch} val_loss={result.best_val_loss:.4f}; wrote {out / 'checkpoint.vckp'}")
    rec.write("ok", best_epoch=result.best_epoch, epochs_run=result.epochs_run, stopped_early=result.stopped_early)
    return EXIT_OK


CAPTION_DEFAULTS = dict(checkpoint=None, video=None, out=".", beam=1, mode=None, max_len=20, seed=0)


def _strategy(beam):
    return ("greedy", 1) if beam <= 1 else ("beam", beam)


def _mode(model, mode, manifest):
    if mode is None:
        mode = manifest.get("train", {}).get("mode", "soft")
    return mode if model.model_cfg.use_attention else "soft"


def attention_record(model, result, mode):
    steps = []
    for i, st in enumerate(result.trace):
        entry = {"index": i, "token": st.token, "word": model.vocab.tokens[st.token]}
        if st.alpha is not None:
            entry["alpha"] = {"shape": list(result.grid), "values": st.alpha}
            entry["beta"] = st.beta
            if st.m is not None:
                entry["m"] = st.m
        steps.append(entry)
    return {"caption": model.caption_text(result), "mode": mode, "order": model.model_cfg.attention_order,
            "grid": list(result.grid), "layers": list(model.spec.layers), "truncated": result.truncated,
            "note": "the first word is predicted without attention", "steps": steps}


def _caption_one(cfg, command):
    if not cfg["checkpoint"] or not cfg["video"]:
        raise ConfigError("--checkpoint and --video are required")
    model, manifest = CaptionModel.load(cfg["checkpoint"])
    mode = _mode(model, cfg["mode"], manifest)
    strategy, width = _strategy(cfg["beam"])
    result = model.caption(load_video(cfg["video"]), strategy=strategy, beam_width=width, mode=mode,
                           max_len=cfg["max_len"])
    out = Path(cfg["out"])
    rec = RunRecorder(command, cfg, out)
    stem = Path(cfg["video"]).stem
    return model, result, mode, out, rec, stem


def cmd_caption(cfg):
    model, result, mode, out, rec, stem = _caption_one(cfg, "caption")
    text = model.caption_text(result)
    rec.output(atomic_write_text(out / f"{stem}.txt", text + "\n"))
    rec.output(atomic_write_json(out / f"{stem}.attn.json", attention_record(model, result, mode)))
    print(text)
    rec.write("ok", truncated=result.truncated)
    return EXIT_OK


def cmd_inspect_attention(cfg):
    model, result, mode, out, rec, stem = _caption_one(cfg, "inspect-attention")
    record = attention_record(model, result, mode)
    rec.output(atomic_write_json(out / f"{stem}.attn.json", record))
    print(json.dumps(record))
    rec.write("ok")
    return EXIT_OK


EVAL_DEFAULTS = dict(checkpoint=None, data="corpus", split="test", out=".", beam=1, mode=None, max_len=20, seed=0)


def cmd_eval(cfg):
    if not cfg["checkpoint"]:
        raise ConfigError("--checkpoint is required")
    model, manifest = CaptionModel.load(cfg["checkpoint"])
    corpus = Corpus(cfg["data"])
    mode = _mode(model, cfg["mode"], manifest)
    strategy, width = _strategy(cfg["beam"])
    videos, refs = corpus.load_split(cfg["split"])
    cands = [model.caption_text(model.caption(v, strategy=strategy, beam_width=width, mode=mode,
                                              max_len=cfg["max_len"])).split() for v in videos]
    report = corpus_bleu(cands, [[r.split() for r in rs] for rs in refs])
    out = Path(cfg["out"])
    rec = RunRecorder("eval", cfg, out)
    rec.output(atomic_write_text(out / f"eval-{cfg['split']}.json", report.to_json() + "\n"))
    print(report.summary_line())
    rec.write("ok", bleu4=report.bleu4)
    return EXIT_OK


GRADCHECK_DEFAULTS = dict(hard=False, tiny=False, seeds=20, out=".", seed=0)


def cmd_gradcheck(cfg):
    rec = RunRecorder("gradcheck", cfg, cfg["out"])
    base = cfg["seed"]
    if cfg["hard"]:
        suite = hard_suite(tiny=cfg["tiny"], seeds=(base, base + 1))
        for line in suite.lines():
            print(line)
        ok = suite.passed
        rec.write("pass" if ok else "fail", max_rel_error=suite.max_rel_error)
    else:
        n = 3 if cfg["tiny"] else cfg["seeds"]
        reports = soft_gradcheck(seeds=range(base, base + n))
        worst = 0.0
        for seed, rep in reports:
            print(f"seed={seed} scalars={rep.n_checked} max_rel_err={rep.worst:.3e} {'ok' if rep.passed else 'FAIL'}")
            worst = max(worst, rep.worst)
        print(f"max relative error over {n} seeds: {worst:.3e} (tol {SOFT_TOL:g})")
        ok = all(rep.passed for _, rep in reports)
        rec.write("pass" if ok else "fail", max_rel_error=worst)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


RF_DEFAULTS = dict(paper_scale=False, out=".", seed=0, divisor=8, height=64, width=64, n_frames=16)


def cmd_check_rf(cfg):
    rec = RunRecorder("check-rf", cfg, cfg["out"])
    if cfg["paper_scale"]:
        check, solved, report = receptive.reference_table_check()
        for line in receptive.format_table_check(check):
            print(line)
        print("aligning transforms solved on the reference stack: "
              + ", ".join(f"{n}: kernel {t.kernel[0]} pad {t.pad[0]} pool {t.ratio[0]}" for n, t in solved.transforms))
        print("common input interval check: " + ("PASS" if report.passed else "FAIL"))
        ok = check.passed and report.passed
        rec.write("pass" if ok else "fail",
                  mismatches=[{"table": r[0], "layer": r[1], "axis": r[2], "computed": list(r[3]),
                               "reference": list(r[4])} for r in check.mismatches])
        return EXIT_OK if ok else EXIT_CHECK_FAILED
    enc = EncoderConfig(divisor=cfg["divisor"], input_size=(cfg["height"], cfg["width"]))
    shapes = pyramid_shapes(enc, cfg["n_frames"])
    spec = default_spec(shapes)
    arch = c3d_stack()
    report = receptive.verify_alignment(arch, spec)
    print(f"aligned maps of the desk extractor in the input video ({cfg['height']}x{cfg['width']}x{cfg['n_frames']}):")
    for line in report.lines():
        print(line)
    exact = receptive.solve_alignment(arch, list(spec.layers))
    print("exactly aligning transforms: "
          + ", ".join(f"{n}: kernel {t.kernel} pad {t.pad} pool {t.ratio}" for n, t in exact.transforms))
    rec.write("pass" if report.passed else "fail", centres_aligned=report.centers_aligned)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------
COMMANDS = {
    "gen-data": (cmd_gen_data, GEN_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "caption": (cmd_caption, CAPTION_DEFAULTS),
    "eval": (cmd_eval, EVAL_DEFAULTS),
    "gradcheck": (cmd_gradcheck, GRADCHECK_DEFAULTS),
    "check-rf": (cmd_check_rf, RF_DEFAULTS),
    "inspect-attention": (cmd_inspect_attention, CAPTION_DEFAULTS),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="vidcap", description="Attention-based video captioning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic captioned-video corpus")
    _add_common(p, "corpus")
    for name in ("n-train", "n-val", "n-test", "channels", "n-frames", "height", "width"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train a captioning model")
    _add_common(p, "run")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--mode", choices=("soft", "hard"))
    p.add_argument("--attention-order", choices=(ST_FIRST, LAYER_FIRST))
    p.add_argument("--k", type=int, metavar="N", help="samples per example in hard mode")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--dropout", type=float)

    for name, helptext in (("caption", "caption one video"),
                           ("inspect-attention", "dump per-word attention weights of one video as JSON")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--checkpoint", metavar="PATH")
        p.add_argument("--video", metavar="PATH")
        p.add_argument("--beam", type=int, metavar="N")
        p.add_argument("--mode", choices=("soft", "hard"))
        p.add_argument("--max-len", type=int)

    p = sub.add_parser("eval", help="corpus BLEU-4 of a checkpoint on one split")
    _add_common(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--beam", type=int, metavar="N")
    p.add_argument("--mode", choices=("soft", "hard"))
    p.add_argument("--max-len", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference and enumeration gradient suites")
    _add_common(p)
    p.add_argument("--hard", action="store_const", const=True, help="run the hard-attention estimator suite")
    p.add_argument("--tiny", action="store_const", const=True, help="smallest instances only")
    p.add_argument("--seeds", type=int, metavar="N")

    p = sub.add_parser("check-rf", help="receptive-field and alignment arithmetic")
    _add_common(p)
    p.add_argument("--paper-scale", action="store_const", const=True,
                   help="check the full-scale reference tables instead of the desk extractor")
    for name in ("divisor", "height", "width", "n-frames"):
        p.add_argument(f"--{name}", type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    func, defaults = COMMANDS[args.command]
    try:
        cfg = _effective_config(args, defaults)
        return func(cfg)
    except VidcapError as exc:
        print(f"error={exc.error_class} message={_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"error={type(exc).__name__} message={_one_line(exc)}", file=sys.stderr)
        return EXIT_ERROR


def _one_line(exc):
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
