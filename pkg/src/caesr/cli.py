"""Command-line interface: encode, decode, train, eval, bdrate, info."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import container
from .baselayer import BaseLayerConfig, BaseLayerError
from .codec import (MANIFEST_NAME, ModelEntry, ModelResolutionError, decode_with_manifest, encode_picture,
                    find_entry, load_model, read_manifest)
from .entropy.latents import LatentDecodeError
from .image import ImageFormatError, load_image, save_image, write_yuv
from .networks import CodingMode

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_CODEC = 4

log = logging.getLogger("caesr")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _bl_config(args, qp: int) -> BaseLayerConfig:
    encoder = getattr(args, "external_codec", None) or os.environ.get("CAESR_EXTERNAL_CODEC")
    decoder = getattr(args, "external_decoder", None) or os.environ.get("CAESR_EXTERNAL_DECODER")
    if encoder:
        return BaseLayerConfig("external", qp, encoder, decoder)
    return BaseLayerConfig("toy_intra", qp)


def _resolve_weights(weights: Path, mode: CodingMode, bl_qp: int) -> ModelEntry:
    """``weights`` is a manifest directory or a weights file listed in its directory's manifest."""
    if weights.is_dir():
        return find_entry(weights, mode=mode, bl_qp=bl_qp)
    if not weights.exists():
        raise CliError(f"weights {weights} not found", EXIT_CONFIG)
    for entry in read_manifest(weights.parent):
        if entry.weights == weights.name:
            return entry
    raise CliError(f"{weights} is not listed in {weights.parent / MANIFEST_NAME}", EXIT_CONFIG)


def cmd_encode(args) -> int:
    mode = CodingMode.parse(args.mode)
    try:
        img = load_image(args.input)
    except (OSError, ImageFormatError) as exc:
        raise CliError(f"cannot read {args.input}: {exc}", EXIT_IO)
    bl_cfg = _bl_config(args, args.bl_qp)
    model, model_id = None, 0
    if mode.uses_autoencoder or mode.uses_sr:
        if not args.weights:
            raise CliError(f"mode {mode.name} needs --weights", EXIT_CONFIG)
        entry = _resolve_weights(Path(args.weights), mode, args.bl_qp)
        weights_dir = Path(args.weights) if Path(args.weights).is_dir() else Path(args.weights).parent
        model, model_id = load_model(weights_dir, entry), entry.model_id
    coded = encode_picture(img, mode, bl_cfg, model, model_id)
    try:
        Path(args.out).write_bytes(coded.bitstream)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO)
    total = len(coded.bitstream)
    print(f"mode={mode.name} bl_qp={args.bl_qp} bytes={total} bpp={coded.bpp():.6f} "
          f"bl_bytes={coded.bl_bytes} el_bytes={coded.el_bytes} "
          f"container_bytes={total - coded.bl_bytes - coded.el_bytes}")
    return EXIT_OK


def _read_stream(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO)


def cmd_decode(args) -> int:
    data = _read_stream(args.inp)
    header = container.parse_header(data)
    bl_cfg = None
    if container.BL_CODECS[header.bl_codec] == "external":
        decoder = args.external_decoder or os.environ.get("CAESR_EXTERNAL_DECODER")
        if not decoder:
            raise CliError("stream uses an external base layer; pass --external-decoder", EXIT_CONFIG)
        bl_cfg = BaseLayerConfig("external", header.bl_qp, external_decoder=decoder)
    dec = decode_with_manifest(data, args.weights_dir, bl_cfg)
    out = Path(args.out)
    try:
        if args.format == "yuv" or (args.format == "auto" and out.suffix.lower() == ".yuv"):
            write_yuv(dec.image, out)
        else:
            save_image(dec.image, out)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO)
    print(f"decoded {dec.header.width}x{dec.header.height} mode={CodingMode(dec.header.mode).name} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, train
    try:
        cfg = TrainConfig.from_file(args.config)
    except OSError as exc:
        raise CliError(f"cannot read {args.config}: {exc}", EXIT_IO)
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad config {args.config}: {exc}", EXIT_CONFIG)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    _, records = train(cfg)
    last = records[-1] if records else None
    print(f"trained {len(records)} steps -> {cfg.output_dir}"
          + (f" final D={last.distortion:.6g} R={last.rate_bpp:.6g} total={last.total:.6g}" if last else ""))
    return EXIT_OK


def _eval_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO)
    except ValueError as exc:
        raise CliError(f"bad config {path}: {exc}", EXIT_CONFIG)


def cmd_eval(args) -> int:
    from .evaluation import DEFAULT_ANCHOR_QPS, DEFAULT_QPS, run_ablation
    cfg = _eval_config(args.config)
    known = {"weights_dir", "qps", "anchor_qps", "modes", "out_csv", "summary_csv", "verify"}
    if set(cfg) - known:
        raise CliError(f"unknown eval config keys: {sorted(set(cfg) - known)}", EXIT_CONFIG)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, summary = run_ablation(
        args.corpus, cfg.get("weights_dir", args.weights_dir),
        tuple(cfg.get("qps", DEFAULT_QPS)), tuple(cfg.get("anchor_qps", DEFAULT_ANCHOR_QPS)),
        tuple(cfg.get("modes", [m.name for m in CodingMode])), _bl_config(args, 37), args.jobs,
        out_dir / cfg.get("out_csv", "rd_points.csv"), out_dir / cfg.get("summary_csv", "bd_summary.csv"),
        cfg.get("verify", True))
    for mode, bp, bs in summary:
        print(f"{mode:>20s}  bd_rate_psnr={bp:+.4f}%  bd_rate_ssim={bs:+.4f}%")
    return EXIT_OK


def cmd_bdrate(args) -> int:
    from .evaluation import bd_rate, mean_curves, read_rows
    try:
        anchor_rows, test_rows = read_rows(args.anchor), read_rows(args.test)
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    anchors, tests = mean_curves(anchor_rows), mean_curves(test_rows)
    a_mode = args.anchor_mode or next(iter(anchors), None)
    if a_mode not in anchors:
        raise CliError(f"anchor mode {a_mode!r} not found in {args.anchor}", EXIT_CONFIG)
    modes = [args.test_mode] if args.test_mode else list(tests)
    for m in modes:
        if m not in tests:
            raise CliError(f"test mode {m!r} not found in {args.test}", EXIT_CONFIG)
        print(f"{m}: bd_rate_psnr={bd_rate(anchors[a_mode], tests[m], 'psnr'):+.4f}% "
              f"bd_rate_ssim={bd_rate(anchors[a_mode], tests[m], 'ssim'):+.4f}%")
    return EXIT_OK


def cmd_info(args) -> int:
    data = _read_stream(args.inp)
    header, bl, z, y = container.demux(data)
    print(f"version={header.version} mode={CodingMode(header.mode).name} ({header.mode})")
    print(f"size={header.width}x{header.height} padded={header.padded_size[0]}x{header.padded_size[1]}")
    print(f"bl_codec={container.BL_CODECS[header.bl_codec]} bl_qp={header.bl_qp} model_id={header.model_id}")
    print(f"header_bytes={container.HEADER_SIZE} bl_bytes={len(bl)} z_bytes={len(z)} y_bytes={len(y)} "
          f"total_bytes={len(data)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="caesr", description="Layered learned image codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="encode an image into a .caesr container")
    e.add_argument("--input", required=True)
    e.add_argument("--mode", required=True, choices=[m.name for m in CodingMode])
    e.add_argument("--bl-qp", type=int, default=37)
    e.add_argument("--weights", help="weights file or manifest directory")
    e.add_argument("--out", required=True)
    e.add_argument("--external-codec", help="command template with {in} {out} {recon} {qp} {w} {h}")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a .caesr container")
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--weights-dir")
    d.add_argument("--out", required=True)
    d.add_argument("--format", choices=["auto", "png", "yuv"], default="auto")
    d.add_argument("--external-decoder", help="command template with {in} {recon} {w} {h}")
    d.set_defaults(func=cmd_decode)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="run the ablation over a corpus")
    v.add_argument("--corpus", required=True)
    v.add_argument("--config")
    v.add_argument("--weights-dir")
    v.add_argument("--out-dir", default=".")
    v.add_argument("--jobs", type=int, default=1)
    v.add_argument("--external-codec")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bdrate", help="BD-rate between two RD CSV files")
    b.add_argument("--anchor", required=True)
    b.add_argument("--test", required=True)
    b.add_argument("--anchor-mode")
    b.add_argument("--test-mode")
    b.set_defaults(func=cmd_bdrate)

    i = sub.add_parser("info", help="print a container's header and payload sizes")
    i.add_argument("--in", dest="inp", required=True)
    i.set_defaults(func=cmd_info)
    return p


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (container.ContainerError, OSError, ImageFormatError)):
        return EXIT_IO
    if isinstance(exc, (ModelResolutionError, json.JSONDecodeError)):
        return EXIT_CONFIG
    if isinstance(exc, (BaseLayerError, LatentDecodeError)):
        return EXIT_CODEC
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"caesr {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
