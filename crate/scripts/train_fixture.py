"""Train the small digits CNN shipped in crates/core/fixtures.

Writes:
  digits-cnn.json        model (base64 little-endian f32 tensors)
  digits-test.idx        600 held-out 8x8 images, u8 pixels
  digits-test.labels.idx their labels

Run from the repository root:  python3 scripts/train_fixture.py
Requires torch and scikit-learn. Inference never needs Python.
"""

import base64
import json
import struct
from pathlib import Path

import numpy as np
import torch
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split
from torch import nn

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"
SEED = 7
TEST_SIZE = 600


def b64(t):
    return base64.b64encode(t.detach().numpy().astype("<f4").tobytes()).decode()


def write_idx(path, images, labels):
    n, h, w = images.shape
    path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes())
    labels_path = path.with_name(path.name[: -len(".idx")] + ".labels.idx")
    labels_path.write_bytes(struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())


def main():
    torch.manual_seed(SEED)
    digits = load_digits()
    # 0..16 -> 0..255 so the Rust side can use pixel / 255.
    pixels = np.rint(digits.images * 255.0 / 16.0).astype(np.uint8)
    x_tr, x_te, y_tr, y_te = train_test_split(
        pixels, digits.target, test_size=TEST_SIZE, random_state=SEED, stratify=digits.target
    )

    conv = nn.Conv2d(1, 8, 3, padding=1)
    fc1 = nn.Linear(128, 32)
    fc2 = nn.Linear(32, 10)
    net = nn.Sequential(conv, nn.ReLU(), nn.MaxPool2d(2), nn.Flatten(), fc1, nn.ReLU(), fc2)

    xt = torch.tensor(x_tr, dtype=torch.float32).unsqueeze(1) / 255.0
    yt = torch.tensor(y_tr, dtype=torch.long)
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    loss_fn = nn.CrossEntropyLoss()
    for _ in range(60):
        perm = torch.randperm(len(xt))
        for i in range(0, len(xt), 64):
            idx = perm[i : i + 64]
            opt.zero_grad()
            loss_fn(net(xt[idx]), yt[idx]).backward()
            opt.step()

    with torch.no_grad():
        xe = torch.tensor(x_te, dtype=torch.float32).unsqueeze(1) / 255.0
        acc = (net(xe).argmax(1).numpy() == y_te).mean()
    print(f"held-out top1: {100 * acc:.2f}%")

    model = {
        "name": "digits-cnn",
        "input": [1, 8, 8],
        "layers": [
            {"type": "conv2d", "in_channels": 1, "out_channels": 8, "kernel": 3, "stride": 1, "pad": 1,
             "weights": b64(conv.weight), "bias": b64(conv.bias)},
            {"type": "relu"},
            {"type": "maxpool", "size": 2, "stride": 2},
            {"type": "flatten"},
            {"type": "dense", "in": 128, "out": 32, "weights": b64(fc1.weight), "bias": b64(fc1.bias)},
            {"type": "relu"},
            {"type": "dense", "in": 32, "out": 10, "weights": b64(fc2.weight), "bias": b64(fc2.bias)},
            {"type": "softmax"},
        ],
    }
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "digits-cnn.json").write_text(json.dumps(model, indent=1) + "\n")
    write_idx(OUT / "digits-test.idx", x_te, y_te)


if __name__ == "__main__":
    main()
