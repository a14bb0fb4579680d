"""Command-line entry point: train / compress / decompress / sweep / eval.

Flag precedence is CLI flag > config file > default; the effective
configuration is echoed on startup. All output files are written to a
temp path and renamed on success, so no command leaves partial output.
"""

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from .coder import (BitstreamHeader, compress_latents, decompress_latents,
                    pack_container, rate_estimate, unpack_container)
from .errors import CodecError, ConfigError, UsageError
from .interpolation import (alpha_sweep, interpolate_images,
                            interpolate_networks, psnr)
from .model import CodecModel, Decoder, ModelConfig, _net_rng, quantize_round
from .ppm import pad_to_multiple, read_ppm, write_ppm
from .training import (TrainConfig, load_checkpoint, make_synthetic_textures,
                       parse_train_config, save_checkpoint, train_stage1,
                       train_stage2)

DEFAULT_ALPHA = 0.8
DEFAULT_ALPHA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def _threads():
    try:
        return max(1, int(os.environ.get("GMCODEC_THREADS", "1")))
    except ValueError:
        return 1


def _atomic_write(path, data):
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _parse_model_config(path, overrides=None):
    values = {}
    if path:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, raw = line.partition("=")
                values[key.strip()] = raw.strip()
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    names = {f.name for f in fields(ModelConfig)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    for f in fields(ModelConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        if f.name == "attention_enabled":
            kwargs[f.name] = str(raw).lower() in ("1", "true", "yes")
        elif f.name == "sigma_floor":
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return ModelConfig(**kwargs)


def _load_images(data_dir, patch_size):
    if not os.path.isdir(data_dir):
        raise UsageError(f"dataset directory '{data_dir}' does not exist")
    images = []
    for name in sorted(os.listdir(data_dir)):
        if name.lower().endswith(".ppm"):
            images.append(read_ppm(os.path.join(data_dir, name))[0])
    if not images:
        raise UsageError(f"no .ppm images found in '{data_dir}'")
    return images


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    model = CodecModel(ckpt.model_config, seed=0)
    if "encoder" in ckpt.stores:
        model.encoder.load_params(ckpt.stores["encoder"])
    if "context" in ckpt.stores:
        model.context.load_params(ckpt.stores["context"])
    if "decoder_g1" in ckpt.stores:
        model.decoder.load_params(ckpt.stores["decoder_g1"])
    return ckpt, model


def _g2_store(args, ckpt):
    if getattr(args, "weights_g2", None):
        other = load_checkpoint(args.weights_g2, ckpt.model_config)
        for key in ("decoder_g2", "decoder_g1"):
            if key in other.stores:
                return other.stores[key]
        raise UsageError(f"'{args.weights_g2}' contains no decoder weights")
    if "decoder_g2" in ckpt.stores:
        return ckpt.stores["decoder_g2"]
    return None


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    overrides = {
        "stage": args.stage, "seed": args.seed, "iterations": args.iterations,
        "lambda_d1": args.lambda_d1, "lr": args.lr,
        "batch_size": args.batch_size, "patch_size": args.patch_size,
    }
    if args.config:
        tcfg = parse_train_config(args.config, overrides)
    else:
        kwargs = {k: v for k, v in overrides.items() if v is not None}
        tcfg = TrainConfig(**kwargs)
    mcfg = _parse_model_config(args.model_config)
    print(f"effective model config: {mcfg.canonical()}")
    print(f"effective train config: {tcfg.canonical()}")

    if args.data == "synthetic":
        images = make_synthetic_textures(16, max(2 * tcfg.patch_size, 64),
                                         seed=tcfg.seed)
    else:
        images = _load_images(args.data, tcfg.patch_size)

    log = []
    if tcfg.stage == 1:
        ckpt = train_stage1(mcfg, tcfg, images, loss_log=log)
    else:
        if not args.stage1_ckpt:
            raise UsageError("stage 2 requires --stage1-ckpt pointing at a "
                             "stage-1 checkpoint")
        s1 = load_checkpoint(args.stage1_ckpt, mcfg)
        ckpt = train_stage2(mcfg, tcfg, images, s1, loss_log=log)
    save_checkpoint(ckpt, args.out)
    if args.loss_log:
        keys = list(log[0].keys()) if log else ["iteration"]
        lines = [",".join(keys)]
        for row in log:
            lines.append(",".join(f"{row[k]:.9g}" if isinstance(row[k], float)
                                  else str(row[k]) for k in keys))
        _atomic_write(args.loss_log, ("\n".join(lines) + "\n").encode())
    print(f"wrote checkpoint to {args.out} ({ckpt.iteration} iterations)")
    return 0


def cmd_compress(args):
    ckpt, model = _model_from_checkpoint(args.weights)
    cfg = ckpt.model_config
    img = read_ppm(args.image)
    orig_h, orig_w = img.shape[2], img.shape[3]
    padded = pad_to_multiple(img, cfg.downsample_factor)
    y = model.encoder.encode(padded)
    z = quantize_round(y, cfg.alphabet_margin)
    payload = compress_latents(z, model.context)
    header = BitstreamHeader(
        config_digest=cfg.digest_bytes(), orig_h=orig_h, orig_w=orig_w,
        padded_h=padded.shape[2], padded_w=padded.shape[3],
        latent_h=z.z.shape[2], latent_w=z.z.shape[3],
        latent_channels=cfg.latent_channels, mixtures=cfg.mixtures,
        z_min=z.z_min, z_max=z.z_max)
    _atomic_write(args.out, pack_container(header, payload))
    if args.dump_latents:
        np.save(args.dump_latents, z.z)
    report = rate_estimate(z, model.context.field(z),
                           orig_h * orig_w).with_actual(len(payload))
    print(f"compressed {args.image}: {orig_w}x{orig_h} -> {len(payload)} payload "
          f"bytes")
    print(f"estimated bpp: {report.bpp_estimated:.6f}  actual bpp: "
          f"{report.bpp_actual:.6f}")
    return 0


def cmd_decompress(args):
    ckpt, model = _model_from_checkpoint(args.weights)
    cfg = ckpt.model_config
    with open(args.bitstream, "rb") as f:
        blob = f.read()
    header, payload = unpack_container(blob, cfg.digest_bytes())
    z = decompress_latents(payload, model.context,
                           (header.latent_channels, header.latent_h,
                            header.latent_w),
                           header.z_min, header.z_max)
    if args.dump_latents:
        np.save(args.dump_latents, z.z)
    alpha = args.alpha
    g1 = ckpt.stores.get("decoder_g1")
    g2 = _g2_store(args, ckpt)
    if alpha != 0.0 and g2 is None:
        raise UsageError("alpha > 0 requires G2 weights (--weights-g2 or a "
                         "stage-2 checkpoint)")
    if g1 is None and alpha != 1.0:
        raise UsageError("checkpoint contains no decoder_g1 weights")

    def decode_with(store):
        dec = Decoder(cfg, _net_rng(0, 1))
        dec.load_params(store)
        return dec.decode(z)

    if args.mode == "network":
        if alpha == 0.0:
            img = decode_with(g1)
        elif alpha == 1.0:
            img = decode_with(g2)
        else:
            img = decode_with(interpolate_networks(g1, g2, alpha))
    else:
        if alpha == 0.0:
            img = decode_with(g1)
        elif alpha == 1.0:
            img = decode_with(g2)
        else:
            img = interpolate_images(decode_with(g1), decode_with(g2), alpha)
    img = img[:, :, :header.orig_h, :header.orig_w]
    write_ppm(args.out, img)
    print(f"decompressed {args.bitstream} -> {args.out} "
          f"({header.orig_w}x{header.orig_h}, alpha={alpha}, mode={args.mode})")
    return 0


def cmd_sweep(args):
    ckpt, model = _model_from_checkpoint(args.weights)
    cfg = ckpt.model_config
    with open(args.bitstream, "rb") as f:
        blob = f.read()
    header, payload = unpack_container(blob, cfg.digest_bytes())
    g1 = ckpt.stores.get("decoder_g1")
    g2 = _g2_store(args, ckpt)
    if g1 is None or g2 is None:
        raise UsageError("sweep requires both G1 and G2 decoder weights")
    alphas = tuple(float(a) for a in args.alphas.split(","))
    original = read_ppm(args.original)
    os.makedirs(args.out, exist_ok=True)
    report = alpha_sweep(header, payload, model.context, g1, g2, alphas,
                         original, mode=args.mode, image_dir=args.out,
                         threads=_threads())
    _atomic_write(os.path.join(args.out, "sweep.csv"), report.to_csv().encode())
    print(report.to_csv(), end="")
    return 0


def cmd_eval(args):
    x = read_ppm(args.original)
    xhat = read_ppm(args.reconstruction)
    value = psnr(x, xhat)
    print(f"psnr_db: {value:.9f}")
    if args.bitstream:
        with open(args.bitstream, "rb") as f:
            blob = f.read()
        header, payload = unpack_container(blob)
        bpp = 8.0 * len(payload) / (header.orig_h * header.orig_w)
        print(f"actual_bpp: {bpp:.9f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="gmcodec",
                                description="GMM-context learned image codec")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run stage-1 or stage-2 training")
    t.add_argument("--stage", type=int, choices=(1, 2), default=None)
    t.add_argument("--config", help="train config file (key=value lines)")
    t.add_argument("--model-config", help="model config file (key=value lines)")
    t.add_argument("--data", required=True,
                   help="directory of .ppm images, or 'synthetic'")
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.add_argument("--loss-log", help="CSV loss log path")
    t.add_argument("--stage1-ckpt", help="stage-1 checkpoint (stage 2 only)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--lambda-d1", dest="lambda_d1", type=float, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="compress a PPM image")
    c.add_argument("image")
    c.add_argument("--weights", required=True, help="checkpoint file")
    c.add_argument("--out", required=True)
    c.add_argument("--dump-latents", help="debug: write quantized latents (.npy)")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decompress a bitstream")
    d.add_argument("bitstream")
    d.add_argument("--weights", required=True, help="checkpoint file")
    d.add_argument("--weights-g2", help="checkpoint providing the G2 decoder")
    d.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    d.add_argument("--mode", choices=("network", "image"), default="network")
    d.add_argument("--out", required=True)
    d.add_argument("--dump-latents", help="debug: write decoded latents (.npy)")
    d.set_defaults(func=cmd_decompress)

    s = sub.add_parser("sweep", help="alpha sweep over one bitstream")
    s.add_argument("bitstream")
    s.add_argument("--weights", required=True)
    s.add_argument("--weights-g2")
    s.add_argument("--original", required=True)
    s.add_argument("--alphas",
                   default=",".join(str(a) for a in DEFAULT_ALPHA_GRID))
    s.add_argument("--mode", choices=("network", "image"), default="network")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="PSNR (and bpp given a bitstream)")
    e.add_argument("original")
    e.add_argument("reconstruction")
    e.add_argument("--bitstream")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CodecError as e:
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
