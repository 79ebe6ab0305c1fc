"""Smoke test for the hrstnet_py extension.

Run after `maturin develop -m crates/py/Cargo.toml`, or after
`cargo build -p hrstnet-py --features extension-module --release`
(the script then loads the shared library from target/).
"""

import importlib.machinery
import importlib.util
import json
import pathlib
import sys


def load():
    try:
        import hrstnet_py

        return hrstnet_py
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        lib = root / "target" / profile / "libhrstnet_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("hrstnet_py", str(lib))
            spec = importlib.util.spec_from_loader("hrstnet_py", loader)
            mod = importlib.util.module_from_spec(spec)
            loader.exec_module(mod)
            return mod
    sys.exit("hrstnet_py is not built")


def main():
    h = load()

    trace = json.loads(h.shape_trace(h.ModelConfig(), (128, 128, 128)))
    assert [s["dims"][0] for s in trace["streams"]] == [32, 16, 8, 4]
    assert [s["heads"] for s in trace["streams"]] == [3, 6, 12, 24]

    tiny = h.ModelConfig.tiny()
    model = h.Model(tiny, seed=0)
    assert model.param_count() == tiny.param_count()

    dims = (16, 16, 16)
    image, labels = h.synthetic_case(1, dims)
    logits = model.forward(image, dims)
    assert len(logits) == tiny.num_classes * 16**3
    total, dice, ce = model.loss(image, labels, dims)
    assert abs(total - (dice + ce)) < 1e-12 and total > 0
    pred = model.predict(image, dims, (16, 16, 16))
    assert len(pred) == 16**3 and set(pred) <= {0, 1}

    fg = [v == 1 for v in labels]
    assert h.dice_score(fg, fg, dims) == 1.0
    assert h.hd95(fg, fg, dims) == 0.0

    assert h.lr_at(0) == 0.0
    assert abs(h.lr_at(50) - 1e-4) < 1e-15
    assert h.lr_at(299) == 0.0

    report = h.gradcheck(seed=0)
    assert report["passed"], report

    try:
        h.ModelConfig(variant=7)
    except ValueError:
        pass
    else:
        raise AssertionError("variant 7 accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
