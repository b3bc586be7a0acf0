#!/usr/bin/env python3
"""Smoke test for the crispe Python extension.

Builds are produced by cargo as lib<name>.so; this script copies the
artifact next to itself under the importable module name, then runs a small
end-to-end editing flow.

Usage:
    cargo build -p crispe-py --release
    python3 python/smoke_test.py [--debug]
"""

import shutil
import sys
import sysconfig
import tempfile
from pathlib import Path


def locate_extension(repo_root: Path, profile: str) -> Path:
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    candidates = [
        repo_root / "target" / profile / "libcrispe_py.so",
        repo_root / "target" / profile / "libcrispe_py.dylib",
        repo_root / "target" / profile / ("crispe_py" + suffix),
    ]
    for cand in candidates:
        if cand.exists():
            return cand
    raise SystemExit(
        f"extension not found (looked in target/{profile}); "
        f"run `cargo build -p crispe-py --{profile}` first"
        if profile == "release"
        else f"extension not found; run `cargo build -p crispe-py` first"
    )


def import_crispe():
    repo_root = Path(__file__).resolve().parent.parent
    profile = "debug" if "--debug" in sys.argv else "release"
    ext = locate_extension(repo_root, profile)
    stage = Path(tempfile.mkdtemp(prefix="crispe-py-"))
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy2(ext, stage / f"crispe{suffix}")
    sys.path.insert(0, str(stage))
    import crispe  # noqa: E402

    return crispe


def main() -> int:
    crispe = import_crispe()

    cap, edit_task = crispe.Dataset.synthetic_pair(7, 600, 16, 4)
    assert len(cap) == 600 and cap.dim == 16 and cap.class_count == 4

    net = crispe.Network.random([16, 32, 4], ["relu", "identity"], seed=3)
    cap_train, cap_held = cap.split_holdout(1.0 / 6.0, 11)
    trained, train_acc = crispe.pretrain_network(
        net, cap_train, epochs=25, learning_rate=0.1, seed=3
    )
    cap_acc_before = trained.accuracy(cap_held)
    print(f"pretrained: train acc {train_acc:.3f}, held-out acc {cap_acc_before:.3f}")
    assert cap_acc_before >= 0.9, "pretraining failed to separate the synthetic task"

    curv = crispe.Curvature.estimate(
        "kfac", trained, cap_train, layers=[0, 1], mc_samples=4, seed=5
    )
    assert curv.kind == "kfac" and curv.tracked_layers == [0, 1]

    edit_train, edit_held = edit_task.split_holdout(1.0 / 6.0, 11)
    edited, final_loss, rebuilds = crispe.edit(
        trained,
        edit_train,
        curv,
        gamma=0.9,
        layers=[0, 1],
        learning_rate=0.05,
        max_steps=50,
        optimizer="adam",
        seed=5,
    )
    edit_acc = edited.accuracy(edit_held)
    cap_acc_after = edited.accuracy(cap_held)
    print(
        f"edited: edit acc {edit_acc:.3f}, cap acc {cap_acc_after:.3f} "
        f"(loss {final_loss:.4f}, {rebuilds} rebuilds)"
    )
    assert edit_acc >= 0.9, "edit failed to take"

    # The unconstrained control should not preserve capability better.
    zero = crispe.Curvature.estimate("none", trained, cap_train, layers=[0, 1])
    ft, _, _ = crispe.edit(
        trained,
        edit_train,
        zero,
        gamma=0.9,
        layers=[0, 1],
        learning_rate=0.05,
        max_steps=50,
        optimizer="adam",
        seed=5,
    )
    ft_cap = ft.accuracy(cap_held)
    print(f"unprojected control: cap acc {ft_cap:.3f}")
    assert cap_acc_after >= ft_cap - 1e-9, "projection preserved nothing"

    # Round-trip a checkpoint and a curvature cache.
    stage = Path(tempfile.mkdtemp(prefix="crispe-io-"))
    edited.save(stage / "edited.crsp")
    reloaded = crispe.Network.load(stage / "edited.crsp")
    assert reloaded.accuracy(edit_held) == edit_acc
    curv.save(stage / "cache.crvc")
    crispe.Curvature.load(stage / "cache.crvc", "kfac")

    ok, report = crispe.run_verification(seed=2024)
    print(report, end="")
    assert ok, "verification suite failed"

    print("smoke test OK")
    return 0


if __name__ == "__main__":
    sys.exit(main())
