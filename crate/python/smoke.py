"""Smoke test for the Python bindings.

Build first:
    cargo build -p labelmae-py --release --features extension-module
Then:
    python3 python/smoke.py [path/to/liblabelmae_py.so] [path/to/reg.json]
"""

import importlib.machinery
import importlib.util
import pathlib
import random
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load(path):
    loader = importlib.machinery.ExtensionFileLoader("labelmae_py", str(path))
    spec = importlib.util.spec_from_file_location("labelmae_py", str(path), loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def brute_pa_miou(pred, truth, mask, classes):
    ious = []
    for k in range(classes):
        inter = sum(1 for p, t, m in zip(pred, truth, mask) if m and p == k and t == k)
        union = sum(1 for p, t, m in zip(pred, truth, mask) if m and (p == k or t == k))
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def main():
    so = pathlib.Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "target/release/liblabelmae_py.so"
    lm = load(so)
    rng = random.Random(0)

    assert lm.class_weights([0.25] * 4) == [0.5] * 4
    w = lm.class_weights([0.7, 0.2, 0.1])
    assert w[0] < w[1] < w[2], w

    h = wd = 8
    label = [rng.randrange(3) for _ in range(h * wd)]
    image = [rng.random() for _ in range(h * wd * 3)]
    fused = lm.stack_fuse(h, wd, label, image, 3)
    assert len(fused) == h * wd * 6
    assert fused[:3] == [float(label[0] == k) for k in range(3)]

    dropped, kept = lm.select_patches(h, wd, label, 2, 0.5, "random", 7)
    assert len(dropped) == 8 and sorted(dropped + kept) == list(range(16))
    assert lm.select_patches(h, wd, label, 2, 0.5, "random", 7) == (dropped, kept)

    pred = [rng.randrange(3) for _ in range(h * wd)]
    mask = [rng.randrange(2) for _ in range(h * wd)]
    miou, pa = lm.pa_miou(h, wd, pred, label, mask, 3)
    assert pa == brute_pa_miou(pred, label, mask, 3)
    assert miou == brute_pa_miou(pred, label, [1] * (h * wd), 3)

    sched = lm.PlateauSchedule()
    mults = [sched.step(1.0) for _ in range(7)]
    assert mults == [1.0] * 6 + [0.8], mults

    try:
        lm.select_patches(h, wd, label, 3, 0.5, "random", 0)
    except ValueError:
        pass
    else:
        raise AssertionError("patch size 3 does not divide 8")

    if len(sys.argv) > 2:
        n = 64
        partial = [255 if (y // 8 + x // 8) % 2 else 0 for y in range(n) for x in range(n)]
        img = [0.5] * (n * n * 3)
        out = lm.complete_label(sys.argv[2], n, n, partial, img)
        assert 255 not in out and all(o == p for o, p in zip(out, partial) if p != 255)

    print("python smoke test ok")


if __name__ == "__main__":
    main()
