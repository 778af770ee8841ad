import json
import os
import stat

import pytest

from pseudolab.datasets import DatasetSnapshot, count_by_category
from pseudolab.detectors import (
    ExternalDetector,
    SyntheticDetector,
    effective_training_counts,
    infer,
    train,
)
from pseudolab.errors import DetectorError, DetectorProtocolError
from pseudolab.geometry import BBox

from conftest import make_image, manual, pseudo


def snapshot_with_hidden(n_images=6, lesions_per_image=3, labeled_every=1):
    images = []
    k = 0
    for i in range(n_images):
        hidden = []
        anns = []
        for j in range(lesions_per_image):
            c = (k % 4) + 1
            box = BBox(20 + 40 * j, 30 + 25 * (i % 3), 18, 18)
            hidden.append(manual(box.x, box.y, box.w, box.h, c=c))
            if k % labeled_every == 0:
                anns.append(manual(box.x, box.y, box.w, box.h, c=c))
            k += 1
        images.append(make_image(f"im{i:03d}", 200, 200, annotations=anns,
                                 hidden_truth=hidden))
    return DatasetSnapshot(images=tuple(images), round_index=0)


class TestEffectiveCounts:
    def test_counts_cf_matching_only(self):
        # one annotation matches a hidden lesion, one is off in space
        img = make_image("a", 200, 200,
                         annotations=[manual(20, 30, 18, 18, c=1),
                                      manual(150, 150, 18, 18, c=1)],
                         hidden_truth=[manual(20, 30, 18, 18, c=1)])
        snap = DatasetSnapshot(images=(img,), round_index=0)
        counts = effective_training_counts(snap)
        assert counts[1] == 1

    def test_category_must_match(self):
        img = make_image("a", 200, 200,
                         annotations=[manual(20, 30, 18, 18, c=2)],
                         hidden_truth=[manual(20, 30, 18, 18, c=1)])
        snap = DatasetSnapshot(images=(img,), round_index=0)
        counts = effective_training_counts(snap)
        assert counts[1] == 0 and counts[2] == 0

    def test_raw_fallback_without_hidden(self):
        img = make_image("a", 200, 200,
                         annotations=[manual(20, 30, 18, 18, c=1),
                                      manual(150, 150, 18, 18, c=1)])
        snap = DatasetSnapshot(images=(img,), round_index=0)
        assert effective_training_counts(snap)[1] == 2


class TestSyntheticDetector:
    def test_deterministic(self):
        snap = snapshot_with_hidden()
        det = SyntheticDetector(seed=3, recall_base=0.8, fp_rate=0.5)
        a = det.fit(snap).predict(snap)
        b = SyntheticDetector(seed=3, recall_base=0.8, fp_rate=0.5).fit(snap).predict(snap)
        assert a == b

    def test_seed_changes_output(self):
        snap = snapshot_with_hidden()
        a = SyntheticDetector(seed=1, recall_base=0.5).fit(snap).predict(snap)
        b = SyntheticDetector(seed=2, recall_base=0.5).fit(snap).predict(snap)
        assert a != b

    def test_threads_do_not_change_output(self):
        snap = snapshot_with_hidden()
        det = SyntheticDetector(seed=3, recall_base=0.8, fp_rate=1.0).fit(snap)
        assert det.predict(snap, threads=1) == det.predict(snap, threads=8)

    def test_perfect_recall_no_fp(self):
        snap = snapshot_with_hidden()
        det = SyntheticDetector(seed=0, recall_base=1.0, fp_rate=0.0).fit(snap)
        dets = det.predict(snap)
        total_hidden = sum(len(im.hidden_truth) for im in snap.images)
        assert len(dets) == total_hidden
        per_image = {}
        for d in dets:
            per_image.setdefault(d.image_id, []).append(d)
        for im in snap.images:
            got = {(d.box.x, d.box.y, d.category) for d in per_image[im.image_id]}
            want = {(h.box.x, h.box.y, h.category) for h in im.hidden_truth}
            assert got == want

    def test_zero_recall_only_fps(self):
        snap = snapshot_with_hidden()
        det = SyntheticDetector(seed=0, recall_base=0.0, fp_rate=2.0).fit(snap)
        dets = det.predict(snap)
        assert dets
        hidden = {(d.image_id, d.box.x, d.box.y) for d in dets}
        truth = {(im.image_id, h.box.x, h.box.y)
                 for im in snap.images for h in im.hidden_truth or ()}
        assert not hidden & truth

    def test_recall_monotone_in_training_counts(self):
        lightly = snapshot_with_hidden(labeled_every=3)
        fully = snapshot_with_hidden(labeled_every=1)
        gain = SyntheticDetector(seed=0, recall_base=0.1, recall_gain=0.2)
        low = gain.fit(lightly).recall_
        high = SyntheticDetector(seed=0, recall_base=0.1, recall_gain=0.2).fit(fully).recall_
        for c in (1, 2, 3, 4):
            assert high[c] >= low[c]

    def test_tp_stream_shared_across_fits(self):
        # more training data can only add detections, never drop them
        lightly = snapshot_with_hidden(labeled_every=3)
        fully = snapshot_with_hidden(labeled_every=1)
        kwargs = dict(seed=5, recall_base=0.2, recall_gain=0.25, fp_rate=0.0)
        small = SyntheticDetector(**kwargs).fit(lightly).predict(lightly)
        large = SyntheticDetector(**kwargs).fit(fully).predict(fully)
        small_keys = {(d.image_id, d.box, d.category) for d in small}
        large_keys = {(d.image_id, d.box, d.category) for d in large}
        assert small_keys <= large_keys

    def test_fp_stream_depends_on_artifact(self):
        lightly = snapshot_with_hidden(labeled_every=3)
        fully = snapshot_with_hidden(labeled_every=1)
        kwargs = dict(seed=5, recall_base=0.0, fp_rate=3.0)
        a = SyntheticDetector(**kwargs).fit(lightly)
        b = SyntheticDetector(**kwargs).fit(fully)
        assert a.artifact_tag_ != b.artifact_tag_
        fps_a = a.predict(lightly)
        fps_b = b.predict(lightly)
        assert fps_a != fps_b

    def test_jitter_moves_boxes(self):
        snap = snapshot_with_hidden()
        exact = SyntheticDetector(seed=0, recall_base=1.0).fit(snap).predict(snap)
        noisy = SyntheticDetector(seed=0, recall_base=1.0,
                                  localization_jitter=2.0).fit(snap).predict(snap)
        assert len(exact) == len(noisy)
        moved = [n for e, n in zip(exact, noisy) if e.box != n.box]
        assert moved

    def test_boxes_stay_in_bounds(self):
        snap = snapshot_with_hidden()
        det = SyntheticDetector(seed=0, recall_base=1.0, fp_rate=4.0,
                                localization_jitter=5.0).fit(snap)
        for d in det.predict(snap):
            im = snap.image_map[d.image_id]
            assert d.box.x >= 0 and d.box.y >= 0
            assert d.box.x + d.box.w <= im.width + 1e-9
            assert d.box.y + d.box.h <= im.height + 1e-9
            assert 0.0 < d.score < 1.0

    def test_unfitted_raises(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            SyntheticDetector().predict(snapshot_with_hidden())

    def test_bad_params_rejected_at_fit(self):
        from pseudolab.errors import ConfigError
        snap = snapshot_with_hidden()
        with pytest.raises(ConfigError):
            SyntheticDetector(fp_rate=-1.0).fit(snap)
        with pytest.raises(ConfigError):
            SyntheticDetector(fp_size_range=(6.0, 3.0)).fit(snap)

    def test_functional_aliases(self):
        snap = snapshot_with_hidden()
        det = train(SyntheticDetector(seed=0, recall_base=1.0), snap)
        assert infer(det, snap) == det.predict(snap)


SCRIPT_OK = """#!/usr/bin/env python3
import argparse, json, sys
p = argparse.ArgumentParser()
p.add_argument("mode")
p.add_argument("--data")
p.add_argument("--out")
a = p.parse_args()
if a.mode == "train":
    import os
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "weights.txt"), "w") as f:
        data = json.load(open(a.data))
        f.write(str(len(data["images"])))
elif a.mode == "infer":
    data = json.load(open(a.data))
    with open(a.out, "w") as f:
        for im in data["images"]:
            row = {"image_id": im["image_id"], "x": 1.0, "y": 1.0,
                   "w": 5.0, "h": 5.0, "c": 1, "score": 0.75}
            f.write(json.dumps(row) + "\\n")
"""

SCRIPT_FAILS = """#!/usr/bin/env python3
import sys
sys.stderr.write("boom: bad weights\\n")
sys.exit(3)
"""

SCRIPT_NO_OUTPUT = """#!/usr/bin/env python3
import sys
sys.exit(0)
"""

SCRIPT_BAD_ROWS = """#!/usr/bin/env python3
import argparse, json, os
p = argparse.ArgumentParser()
p.add_argument("mode")
p.add_argument("--data")
p.add_argument("--out")
a = p.parse_args()
if a.mode == "train":
    os.makedirs(a.out, exist_ok=True)
else:
    with open(a.out, "w") as f:
        f.write('{"image_id": "im000", "x": 1}\\n')
"""


def write_script(tmp_path, body, name="fake_detector.py"):
    path = tmp_path / name
    path.write_text(body)
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return path


class TestExternalDetector:
    def test_train_and_infer(self, tmp_path):
        script = write_script(tmp_path, SCRIPT_OK)
        snap = snapshot_with_hidden(n_images=3)
        det = ExternalDetector(command=["python3", str(script)],
                               workdir=str(tmp_path / "run"))
        det.fit(snap)
        assert det.artifact_tag_
        dets = det.predict(snap)
        assert len(dets) == 3
        assert all(d.score == 0.75 for d in dets)

    def test_hidden_truth_withheld(self, tmp_path):
        script = write_script(tmp_path, SCRIPT_OK)
        snap = snapshot_with_hidden(n_images=2)
        det = ExternalDetector(command=["python3", str(script)],
                               workdir=str(tmp_path / "run"))
        det.fit(snap)
        payload = json.loads((tmp_path / "run" / "train_input.json").read_text())
        assert all("hidden_truth" not in im for im in payload["images"])

    def test_artifact_tag_tracks_training_data(self, tmp_path):
        script = write_script(tmp_path, SCRIPT_OK)
        det = ExternalDetector(command=["python3", str(script)],
                               workdir=str(tmp_path / "run"))
        tag_small = det.fit(snapshot_with_hidden(n_images=2)).artifact_tag_
        tag_large = det.fit(snapshot_with_hidden(n_images=4)).artifact_tag_
        assert tag_small != tag_large

    def test_nonzero_exit_surfaces_stderr(self, tmp_path):
        script = write_script(tmp_path, SCRIPT_FAILS)
        det = ExternalDetector(command=["python3", str(script)],
                               workdir=str(tmp_path / "run"))
        with pytest.raises(DetectorError) as exc:
            det.fit(snapshot_with_hidden(n_images=2))
        assert "boom" in str(exc.value)

    def test_missing_output_is_protocol_error(self, tmp_path):
        script = write_script(tmp_path, SCRIPT_NO_OUTPUT)
        snap = snapshot_with_hidden(n_images=2)
        det = ExternalDetector(command=["python3", str(script)],
                               workdir=str(tmp_path / "run"))
        det.fit(snap)
        with pytest.raises(DetectorProtocolError):
            det.predict(snap)

    def test_malformed_rows_are_protocol_error(self, tmp_path):
        script = write_script(tmp_path, SCRIPT_BAD_ROWS)
        snap = snapshot_with_hidden(n_images=2)
        det = ExternalDetector(command=["python3", str(script)],
                               workdir=str(tmp_path / "run"))
        det.fit(snap)
        with pytest.raises(DetectorProtocolError):
            det.predict(snap)

    def test_missing_command_is_detector_error(self, tmp_path):
        det = ExternalDetector(command=["/nonexistent/binary"],
                               workdir=str(tmp_path / "run"))
        with pytest.raises(DetectorError):
            det.fit(snapshot_with_hidden(n_images=2))

    def test_env_is_scrubbed(self, tmp_path):
        probe = """#!/usr/bin/env python3
import argparse, json, os, sys
p = argparse.ArgumentParser()
p.add_argument("mode")
p.add_argument("--data")
p.add_argument("--out")
a = p.parse_args()
if "SECRET_TOKEN" in os.environ:
    sys.exit(9)
os.makedirs(a.out, exist_ok=True)
"""
        script = write_script(tmp_path, probe)
        os.environ["SECRET_TOKEN"] = "hunter2"
        try:
            det = ExternalDetector(command=["python3", str(script)],
                                   workdir=str(tmp_path / "run"))
            det.fit(snapshot_with_hidden(n_images=2))
        finally:
            del os.environ["SECRET_TOKEN"]

    def test_env_allowlist_passes_named_vars(self, tmp_path):
        probe = """#!/usr/bin/env python3
import argparse, os, sys
p = argparse.ArgumentParser()
p.add_argument("mode")
p.add_argument("--data")
p.add_argument("--out")
a = p.parse_args()
if os.environ.get("KEEP_ME") != "yes":
    sys.exit(9)
os.makedirs(a.out, exist_ok=True)
"""
        script = write_script(tmp_path, probe)
        os.environ["KEEP_ME"] = "yes"
        try:
            det = ExternalDetector(command=["python3", str(script)],
                                   workdir=str(tmp_path / "run"),
                                   env_allowlist=("KEEP_ME",))
            det.fit(snapshot_with_hidden(n_images=2))
        finally:
            del os.environ["KEEP_ME"]
