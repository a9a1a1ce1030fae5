"""Train the bundled MiniCLIP checkpoint.

    python3 scripts/train_miniclip.py [--seed 0] [--out src/advpt/data/miniclip.bin]

Single-threaded and seeded, so reruns on one machine reproduce the file.
"""

import argparse
import dataclasses
import time

import torch

from advpt._pretrain import PretrainConfig, pretrain
from advpt.encoders import MiniCLIPConfig, load_checkpoint, save_checkpoint
from advpt.synthetic import SyntheticSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="src/advpt/data/miniclip.bin")
    args = ap.parse_args()
    torch.set_num_threads(1)
    config = MiniCLIPConfig()
    spec = SyntheticSpec(image_size=config.image_size)
    train = PretrainConfig()
    t0 = time.time()
    pair, table = pretrain(config, args.seed, spec, train)
    extra = {"synthetic": spec.renderer_params(), "pretrain": dataclasses.asdict(train)}
    save_checkpoint(args.out, pair, table, config, args.seed, extra)
    ck = load_checkpoint(args.out)
    print(f"wrote {args.out} in {time.time() - t0:.0f}s, theta {ck.pair.theta_hash()[:16]}")


if __name__ == "__main__":
    main()
