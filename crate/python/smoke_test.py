"""Smoke test for the rcf Python extension.

Build and install first:
    pip install --no-build-isolation ./crates/py
then run:
    python python/smoke_test.py
"""

import os
import sys
import tempfile

import rcf


def check(cond, what):
    if not cond:
        print(f"FAIL: {what}")
        sys.exit(1)
    print(f"ok: {what}")


def main():
    seq = rcf.Sequence.synthetic("rigid", seed=3, params={"frames": 4})
    check(len(seq) == 4 and len(seq.flows) == 3, "synthetic sequence has 4 frames and 3 flows")
    frame = seq.frames[0]
    gt = seq.gt_masks[0]
    check((frame.height, frame.width) == (64, 64), "frames are 64x64")
    check(all(v in (0.0, 1.0) for v in gt.data), "ground truth is binary")
    check(rcf.miou(gt, gt) == 1.0, "IoU of a mask with itself is 1")

    soft = rcf.Mask(gt.height, gt.width, [0.3 + 0.4 * v for v in gt.data])
    refined = rcf.crf_refine(soft, frame)
    check(rcf.miou(refined.threshold(0.5), gt) > 0.95, "CRF sharpens a blurred ground-truth mask")

    n = 6
    aff = [1.0 if (i < 3) == (j < 3) else 0.0 for i in range(n) for j in range(n)]
    x = [0.6, 0.6, 0.6, 0.4, 0.4, 0.4]
    check(abs(rcf.ncut_value(aff, n, x) - rcf.ncut_value(aff, n, [1 - v for v in x])) < 1e-12,
          "normalized cut is symmetric under complement")
    y = rcf.ncut_refine(aff, n, x)
    check(rcf.ncut_value(aff, n, y) < rcf.ncut_value(aff, n, x), "NCut refinement lowers the cut")

    try:
        rcf.Mask(2, 2, [0.0])
    except ValueError:
        check(True, "shape errors raise ValueError")
    else:
        check(False, "shape errors raise ValueError")

    model = rcf.Model.train([seq], config={"steps_stage1": 5, "batch": 2, "channels": 2}, stage=1)
    check(model.object_channel in (0, 1), "training selects an object channel")
    pred = model.predict(frame)
    check((pred.height, pred.width) == (64, 64), "predictions are resampled to frame size")
    score = model.evaluate([seq])
    check(0.0 <= score <= 1.0, f"evaluation returns an IoU ({score:.3f})")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.rcfk")
        model.save(path)
        again = rcf.Model.load(path)
        check(again.predict(frame).data == pred.data, "checkpoint roundtrip reproduces predictions")
        check(rcf.main(["synth", "--scenario", "rigid", "--out", d, "--config", os.path.join(d, "missing.cfg")]) != 0,
              "CLI reports a missing config file")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
