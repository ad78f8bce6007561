"""Train the desk-scale reference CNN offline and export it as a model manifest.

Needs torch (not a runtime dependency of the package).  By default trains on
the synthetic grating set; pass --cifar-dir to train on real CIFAR-10 binary
batches instead.

    python tools/train_reference.py --out src/rramflip/data/reference_cnn.json
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as tnn

from rramflip import synthetic
from rramflip.io import normalize, read_cifar10_batch, save_model
from rramflip.nn import Network, reference_layers
from rramflip.tensor import FLOAT32, Tensor

TRAIN_SEED, TEST_SEED = 1, 2


def torch_model(widths, num_classes=10):
    c1, c2 = widths
    return tnn.Sequential(
        tnn.Conv2d(3, c1, 3, padding=1), tnn.BatchNorm2d(c1), tnn.ReLU(), tnn.MaxPool2d(2),
        tnn.Conv2d(c1, c2, 3, padding=1), tnn.BatchNorm2d(c2), tnn.ReLU(), tnn.MaxPool2d(2),
        tnn.Flatten(), tnn.Linear(c2 * 8 * 8, num_classes),
    )


def export(model, widths, mean, std, architecture) -> Network:
    layers = reference_layers(10, widths)
    mods = [m for m in model if isinstance(m, (tnn.Conv2d, tnn.BatchNorm2d, tnn.Linear))]
    named = [l for l in layers if l.kind in ("conv2d", "batchnorm2d", "linear")]
    params = {}
    for spec, mod in zip(named, mods):
        sd = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in mod.state_dict().items()
              if k != "num_batches_tracked"}
        for pname in spec.param_shapes():
            params[f"{spec.name}.{pname}"] = Tensor(sd[pname], FLOAT32)
    return Network(layers, params, FLOAT32, 10, (3, 32, 32), tuple(mean), tuple(std), architecture)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--cifar-dir", type=Path)
    ap.add_argument("--train-size", type=int, default=40000)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--noise", type=float, default=0.18)
    ap.add_argument("--widths", type=int, nargs=2, default=(8, 16))
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    if args.cifar_dir:
        parts = [read_cifar10_batch(args.cifar_dir / f"data_batch_{i}.bin") for i in range(1, 6)]
        xtr = np.concatenate([p[0] for p in parts])
        ytr = np.concatenate([p[1] for p in parts])
        xte, yte = read_cifar10_batch(args.cifar_dir / "test_batch.bin")
        architecture = "reference-cifar10"
    else:
        xtr, ytr = synthetic.make_images(args.train_size, TRAIN_SEED, args.noise)
        xte, yte = synthetic.make_images(2000, TEST_SEED, args.noise)
        architecture = "reference-synthetic"
    mean, std = synthetic.channel_stats(xtr)

    Xtr = torch.from_numpy(normalize(xtr, mean, std))
    Xte = torch.from_numpy(normalize(xte, mean, std))
    Ytr = torch.from_numpy(ytr.astype(np.int64))
    Yte = torch.from_numpy(yte.astype(np.int64))

    model = torch_model(args.widths)
    opt = torch.optim.Adam(model.parameters(), lr=args.lr)
    steps = args.epochs * -(-len(Xtr) // 128)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=args.lr, total_steps=steps)
    t0 = time.time()
    for ep in range(args.epochs):
        model.train()
        perm = torch.randperm(len(Xtr))
        for i in range(0, len(Xtr), 128):
            idx = perm[i:i + 128]
            opt.zero_grad()
            loss = tnn.functional.cross_entropy(model(Xtr[idx]), Ytr[idx])
            loss.backward()
            opt.step()
            sched.step()
        model.eval()
        with torch.no_grad():
            acc = (model(Xte).argmax(1) == Yte).float().mean().item()
        print(f"epoch {ep:2d}  test acc {acc:.4f}  {time.time() - t0:.0f}s", flush=True)

    net = export(model, tuple(args.widths), mean, std, architecture)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(net, args.out, extra={"training": {
        "dataset": architecture.split("-", 1)[1], "train_size": len(Xtr), "epochs": args.epochs,
        "noise": args.noise, "seed": args.seed, "test_accuracy_torch": acc,
    }})
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
