import json
import warnings
from dataclasses import replace

import numpy as np
import pytest

from tokenhier.bench import (GLOBAL, LOCAL, SHIFTED, TEST, TRAIN, VAL,
                             AblationConfig, LabeledDataset, SuiteSpec,
                             ablation_config_dict, apply_protocol_shift,
                             balanced_accuracy, class_recalls, embed_dataset,
                             ingest_directory, load_embeddings, make_report,
                             make_pretrain_corpus, make_synthetic_suite,
                             make_token_suite, render_ablation_table,
                             run_ablation, save_embeddings, split_dataset,
                             split_hash, validate_report, write_bacc_svg,
                             write_report)
from tokenhier.color import rgb_to_lab, write_ppm
from tokenhier.encoder import EncoderConfig, init_params
from tokenhier.errors import ConfigError, DataError, ParameterError
from tokenhier.heads import HeadTrainConfig
from tokenhier.numkernel import RngStream
from tokenhier.ssl import SslConfig


SMALL_ENC = EncoderConfig(image_size=32, token_size=16, embed_dim=16,
                          depth=1, num_heads=2, mlp_ratio=2.0)


def small_suite(kind=GLOBAL, per_class=10, seed=0, **kw):
    spec = SuiteSpec(kind=kind, per_class=per_class, image_size=32, **kw)
    return make_synthetic_suite(RngStream(seed=seed, stream_id=3), spec)


def mean_color_nearest_centroid(train, test):
    """Classify test items by nearest train-class mean color."""
    feats = lambda ds: np.stack([r.reshape(-1, 3).mean(axis=0)
                                 for r in ds.rasters])
    ftr, fte = feats(train), feats(test)
    cents = np.stack([ftr[train.labels == c].mean(axis=0)
                      for c in range(len(train.class_names))])
    d = ((fte[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


class TestBalancedAccuracy:
    def test_perfect(self):
        assert balanced_accuracy([0, 1, 2], [0, 1, 2]) == 1.0

    def test_hand_example(self):
        """Recalls 1/2 and 1 average to 3/4."""
        y_true = [0, 0, 1, 1]
        y_pred = [0, 1, 1, 1]
        assert balanced_accuracy(y_true, y_pred) == 0.75

    @pytest.mark.parametrize("c", [2, 3, 5])
    def test_constant_predictor(self, c):
        """Always answering one class scores exactly 1/C."""
        y_true = np.repeat(np.arange(c), 4)
        y_pred = np.zeros_like(y_true)
        assert abs(balanced_accuracy(y_true, y_pred, c) - 1.0 / c) < 1e-15

    def test_equals_accuracy_when_balanced(self):
        rng = RngStream(seed=9, stream_id=2)
        y_true = np.repeat(np.arange(4), 25)
        y_pred = rng.integers(100, 4)
        plain = float(np.mean(y_true == y_pred))
        assert abs(balanced_accuracy(y_true, y_pred, 4) - plain) < 1e-12

    def test_relabeling_invariance(self):
        """Swapping class ids consistently cannot change the score."""
        y_true = np.array([0, 0, 0, 1, 1, 2])
        y_pred = np.array([0, 1, 0, 1, 2, 2])
        swap = np.array([2, 0, 1])
        a = balanced_accuracy(y_true, y_pred, 3)
        b = balanced_accuracy(swap[y_true], swap[y_pred], 3)
        assert abs(a - b) < 1e-15

    def test_zero_support_excluded(self):
        """A class absent from y_true drops out of the mean but is
        visible through class_recalls support."""
        y_true = [0, 0, 1, 1]
        y_pred = [0, 0, 1, 0]
        assert balanced_accuracy(y_true, y_pred, 3) == 0.75
        recalls, support = class_recalls(y_true, y_pred, 3)
        assert support[2] == 0 and np.isnan(recalls[2])

    def test_rejects(self):
        with pytest.raises(ParameterError):
            balanced_accuracy([], [])
        with pytest.raises(ParameterError):
            balanced_accuracy([0, 1], [0])
        with pytest.raises(ParameterError):
            balanced_accuracy([0, 5], [0, 1], num_classes=2)
        with pytest.raises(ParameterError):
            balanced_accuracy([0, -1], [0, 1])


class TestLabeledDataset:
    def test_label_range_checked(self):
        with pytest.raises(ParameterError):
            LabeledDataset([(np.zeros((2, 2, 3), np.uint8), 2)], ["a", "b"],
                           TRAIN)

    def test_source_id_length_checked(self):
        with pytest.raises(ParameterError):
            LabeledDataset([(np.zeros((2, 2, 3), np.uint8), 0)], ["a"],
                           TRAIN, ["x", "y"])

    def test_split_hash_order_free(self):
        r = np.zeros((2, 2, 3), np.uint8)
        a = LabeledDataset([(r, 0), (r, 0)], ["a"], TRAIN, ["s1", "s2"])
        b = LabeledDataset([(r, 0), (r, 0)], ["a"], TRAIN, ["s2", "s1"])
        assert split_hash(a) == split_hash(b)
        assert len(split_hash(a)) == 16


class TestSuiteSpec:
    @pytest.mark.parametrize("kw", [
        dict(num_classes=1), dict(num_classes=5), dict(per_class=4),
        dict(image_size=60), dict(signal_tile=(9, 0)), dict(noise_sigma=0.0),
        dict(color_step=-1.0), dict(color_jitter=-1.0),
        dict(gradient_amp=-2.0), dict(shift_scale=(1.0, 0.0, 1.0)),
        dict(shift_offset=(1.0, 2.0))])
    def test_rejects(self, kw):
        with pytest.raises(ParameterError):
            SuiteSpec(**kw)


class TestSyntheticSuites:
    def test_reproducible(self):
        """Same seed, same spec, byte-identical rasters in every split."""
        a = small_suite(LOCAL, seed=7)
        b = small_suite(LOCAL, seed=7)
        for ds_a, ds_b in zip(a, b):
            assert ds_a.source_ids == ds_b.source_ids
            for (ra, la), (rb, lb) in zip(ds_a.items, ds_b.items):
                assert la == lb and np.array_equal(ra, rb)

    def test_splits_disjoint_and_stratified(self):
        tr, va, te = small_suite(GLOBAL, per_class=20)
        ids = [set(ds.source_ids) for ds in (tr, va, te)]
        assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) \
            and not (ids[1] & ids[2])
        for ds, count in zip((tr, va, te), (12, 4, 4)):
            assert np.bincount(ds.labels, minlength=2).tolist() == [count, count]

    def test_global_mean_color_separates(self):
        """GLOBAL is solvable by nearest mean-color centroid."""
        tr, _, te = small_suite(GLOBAL, per_class=30)
        preds = mean_color_nearest_centroid(tr, te)
        assert balanced_accuracy(te.labels, preds, 2) >= 0.9

    def test_local_mean_color_is_chance(self):
        """LOCAL mean color carries nothing: a nearest-centroid read of
        it stays within the chance band even in sample."""
        tr, va, te = small_suite(LOCAL, per_class=100, seed=1)
        pooled = LabeledDataset(tr.items + va.items + te.items,
                                tr.class_names, "all")
        preds = mean_color_nearest_centroid(tr, pooled)
        assert abs(balanced_accuracy(pooled.labels, preds, 2) - 0.5) <= 0.07

    def test_local_signal_tile_mean_preserving(self):
        """The informative texture moves pixels but not the tile mean."""
        spec = SuiteSpec(kind=LOCAL, per_class=10, image_size=32,
                         noise_sigma=1e-9, distractor_amp=1e-9,
                         gradient_amp=0.0, color_jitter=0.0)
        r0 = RngStream(seed=2, stream_id=8)
        tr, _, _ = make_synthetic_suite(r0, spec)
        gy, gx = spec.signal_tile
        t = spec.tile
        for raster, _ in tr.items[:4]:
            win = raster[gy * t:(gy + 1) * t, gx * t:(gx + 1) * t].astype(float)
            assert abs(win.mean() - 120.0) < 1.0
            assert win.std() > 10.0

    def test_shifted_moves_test_colors(self):
        """Only the test split wears the protocol change, far outside
        the train color range."""
        spec = SuiteSpec(kind=SHIFTED, per_class=20, image_size=32,
                         color_step=2.0, color_jitter=3.0,
                         shift_offset=(20.0, 16.0, -10.0),
                         shift_scale=(1.25, 1.25, 1.25))
        tr, va, te = make_synthetic_suite(RngStream(seed=4, stream_id=3), spec)
        lab_mean = lambda ds: np.mean(
            [rgb_to_lab(r).reshape(-1, 3).mean(axis=0) for r in ds.rasters],
            axis=0)
        m_tr, m_va, m_te = lab_mean(tr), lab_mean(va), lab_mean(te)
        assert np.abs(m_tr - m_va).max() < 3.0
        assert m_te[0] - m_tr[0] > 8.0

    def test_protocol_shift_is_deterministic(self):
        rng = RngStream(seed=11, stream_id=0)
        r = rng.integers(16 * 16 * 3, 256).reshape(16, 16, 3).astype(np.uint8)
        a = apply_protocol_shift(r, (5.0, 3.0, -2.0), (1.1, 1.0, 0.9))
        b = apply_protocol_shift(r, (5.0, 3.0, -2.0), (1.1, 1.0, 0.9))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, r)

    def test_pretrain_corpus(self):
        a = make_pretrain_corpus(RngStream(seed=3, stream_id=1), count=5,
                                 image_size=32)
        b = make_pretrain_corpus(RngStream(seed=3, stream_id=1), count=5,
                                 image_size=32)
        assert len(a) == 5 and a[0].shape == (32, 32, 3)
        assert a[0].dtype == np.uint8
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestTokenSuite:
    def test_shapes_and_balance(self):
        train, val = make_token_suite(RngStream(seed=5, stream_id=2),
                                      embed_dim=8, patch_count=4,
                                      per_class_train=6, per_class_val=3)
        assert len(train) == 12 and len(val) == 6
        seq, label = train[0]
        assert seq.cls.shape == (8,) and seq.patches.shape == (4, 8)
        assert sorted({lab for _, lab in train}) == [0, 1]

    def test_signal_lives_in_one_token(self):
        """Averaged over items, only the signal token separates classes
        and only along the class dimension."""
        train, _ = make_token_suite(RngStream(seed=6, stream_id=2),
                                    embed_dim=8, patch_count=4,
                                    per_class_train=400, per_class_val=2,
                                    signal_index=2, amplitude=4.0, beacon=3.0)
        by_class = {0: [], 1: []}
        for seq, lab in train:
            by_class[lab].append(seq.patches)
        m0 = np.mean(by_class[0], axis=0)
        m1 = np.mean(by_class[1], axis=0)
        gap = np.abs(m0 - m1)
        assert gap[2, 1] > 6.0
        gap[2, 1] = 0.0
        assert gap.max() < 1.0
        cls_gap = np.abs(np.mean([s.cls for s, l in train if l == 0], axis=0)
                         - np.mean([s.cls for s, l in train if l == 1], axis=0))
        assert cls_gap.max() < 1.0

    def test_signal_index_checked(self):
        with pytest.raises(ParameterError):
            make_token_suite(RngStream(seed=0, stream_id=0), patch_count=4,
                             signal_index=4)


def write_tree(root, layout):
    """layout: {class_name: raster count}; 4x4 deterministic pixels."""
    for name, count in layout.items():
        d = root / name
        d.mkdir()
        for i in range(count):
            r = np.full((4, 4, 3), 10 * (i + 1), np.uint8)
            write_ppm(d / f"img{i}.ppm", r)


class TestIngestDirectory:
    def test_basic_layout(self, tmp_path):
        """Sorted subdirectory names define the dense class ids."""
        write_tree(tmp_path, {"tumor": 3, "stroma": 2})
        ds = ingest_directory(tmp_path)
        assert ds.class_names == ["stroma", "tumor"]
        assert len(ds.items) == 5
        assert np.bincount(ds.labels).tolist() == [2, 3]
        assert ds.source_ids[0].startswith("stroma/")

    def test_empty_class_dir_warns_and_excluded(self, tmp_path):
        write_tree(tmp_path, {"a": 2, "b": 1})
        (tmp_path / "empty").mkdir()
        with pytest.warns(UserWarning, match="empty"):
            ds = ingest_directory(tmp_path)
        assert ds.class_names == ["a", "b"]

    def test_unreadable_file_is_itemized(self, tmp_path):
        write_tree(tmp_path, {"a": 1})
        bad = tmp_path / "a" / "broken.ppm"
        bad.write_bytes(b"P6\n4 4\n255\nxx")
        with pytest.raises(DataError, match="broken.ppm"):
            ingest_directory(tmp_path)

    def test_not_a_directory(self, tmp_path):
        with pytest.raises(ParameterError):
            ingest_directory(tmp_path / "missing")

    def test_renaming_changes_ids(self, tmp_path):
        """Class ids follow sorted names, so renames re-map labels."""
        write_tree(tmp_path, {"aa": 1, "bb": 1})
        before = ingest_directory(tmp_path)
        (tmp_path / "aa").rename(tmp_path / "zz")
        after = ingest_directory(tmp_path)
        assert before.class_names == ["aa", "bb"]
        assert after.class_names == ["bb", "zz"]


class TestSplitDataset:
    def make_ds(self, per_class=10):
        r = np.zeros((2, 2, 3), np.uint8)
        items, ids = [], []
        for c in range(2):
            for j in range(per_class):
                items.append((r, c))
                ids.append(f"c{c}-{j}")
        return LabeledDataset(items, ["a", "b"], "all", ids)

    def test_sizes_and_stratification(self):
        tr, va, te = split_dataset(self.make_ds(10), seed=0)
        assert [len(tr.items), len(va.items), len(te.items)] == [12, 4, 4]
        for ds in (tr, va, te):
            counts = np.bincount(ds.labels, minlength=2)
            assert counts[0] == counts[1]

    def test_deterministic_and_seed_sensitive(self):
        ds = self.make_ds(12)
        a1 = split_dataset(ds, seed=5)
        a2 = split_dataset(ds, seed=5)
        b = split_dataset(ds, seed=6)
        assert [x.source_ids for x in a1] == [x.source_ids for x in a2]
        assert [x.source_ids for x in a1] != [x.source_ids for x in b]

    def test_too_small_class_rejected(self):
        with pytest.raises(ParameterError, match="at least 5"):
            split_dataset(self.make_ds(4), seed=0)


class TestEmbedDataset:
    def setup_method(self):
        self.suite = small_suite(GLOBAL, per_class=12)
        self.params = init_params(SMALL_ENC, RngStream(seed=1, stream_id=9))

    def test_order_and_shapes(self):
        tr = self.suite[0]
        seqs = embed_dataset(tr, self.params, SMALL_ENC)
        assert len(seqs) == len(tr.items)
        assert seqs[0].cls.shape == (16,)
        assert seqs[0].patches.shape == (4, 16)

    def test_thread_count_invariant(self):
        """Chunked embedding is byte-identical for 1 and 4 threads."""
        tr = self.suite[0]
        one = embed_dataset(tr, self.params, SMALL_ENC, threads=1)
        four = embed_dataset(tr, self.params, SMALL_ENC, threads=4)
        for a, b in zip(one, four):
            assert np.array_equal(a.cls, b.cls)
            assert np.array_equal(a.patches, b.patches)

    def test_save_load_round_trip(self, tmp_path):
        tr = self.suite[0]
        seqs = embed_dataset(tr, self.params, SMALL_ENC)
        path = tmp_path / "emb.npz"
        save_embeddings(path, seqs, tr.labels, SMALL_ENC,
                        extra={"config_fingerprint": "ab" * 8})
        loaded, labels, extra = load_embeddings(path)
        assert np.array_equal(labels, tr.labels)
        assert extra["config_fingerprint"] == "ab" * 8
        for a, b in zip(seqs, loaded):
            assert np.array_equal(a.cls, b.cls)
            assert np.array_equal(a.patches, b.patches)

    def test_load_rejects_other_kinds(self, tmp_path):
        from tokenhier.checkpoint import save_params

        path = tmp_path / "x.npz"
        save_params(path, "linear_head", {}, {"W": np.zeros((2, 2))})
        with pytest.raises(DataError):
            load_embeddings(path)


class TestReports:
    def make(self):
        return make_report("demo", [0, 0, 1, 1], [0, 1, 1, 1], 2,
                           fingerprint="0123456789abcdef", seed=3,
                           class_names=["a", "b"])

    def test_make_report_fields(self):
        rep = self.make()
        assert rep["bacc"] == 0.75
        assert rep["per_class_recalls"] == [0.5, 1.0]
        assert rep["zero_support_classes"] == []
        validate_report(rep)

    def test_zero_support_reported(self):
        rep = make_report("demo", [0, 0, 1, 1], [0, 1, 1, 1], 3,
                          fingerprint="0123456789abcdef", seed=0)
        assert rep["zero_support_classes"] == [2]
        assert rep["per_class_recalls"][2] is None
        validate_report(rep)

    @pytest.mark.parametrize("patch", [
        {"bacc": 1.5}, {"config_fingerprint": "nothex!"},
        {"format_version": 2}, {"task": None}])
    def test_validation_rejects(self, patch):
        rep = self.make()
        rep.update(patch)
        with pytest.raises(DataError):
            validate_report(rep)

    def test_write_report_round_trip(self, tmp_path):
        rep = self.make()
        path = tmp_path / "report.json"
        write_report(rep, path)
        assert json.loads(path.read_text()) == rep

    def test_delta_rendering(self):
        rep = self.make()
        rep["ablation_rows"] = [
            {"staining_aug": False, "head_mode": "linear", "bacc": 0.813},
            {"staining_aug": True, "head_mode": "linear", "bacc": 0.836},
            {"staining_aug": True, "head_mode": "attnpool", "bacc": 0.869},
        ]
        table = render_ablation_table(rep)
        assert "(2.3↑)" in table and "(3.3↑)" in table
        assert table.count("\n") == 3

    def test_delta_arrow_direction(self):
        rep = self.make()
        rep["ablation_rows"] = [
            {"staining_aug": False, "head_mode": "linear", "bacc": 0.8},
            {"staining_aug": True, "head_mode": "linear", "bacc": 0.75},
        ]
        assert "(5.0↓)" in render_ablation_table(rep)

    def test_svg_deterministic(self, tmp_path):
        rep = self.make()
        rep["ablation_rows"] = [
            {"staining_aug": False, "head_mode": "linear", "bacc": 0.5},
            {"staining_aug": True, "head_mode": "attnpool", "bacc": 0.9},
        ]
        p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
        write_bacc_svg(rep, p1)
        write_bacc_svg(rep, p2)
        data = p1.read_bytes()
        assert data == p2.read_bytes()
        assert data.startswith(b"<svg") and b"</svg>" in data


class TestAblation:
    def tiny_cfg(self, seeds=(0,)):
        return AblationConfig(
            seeds=seeds, pretrain_steps=2, batch_size=4, ssl_lr=1e-3,
            encoder=EncoderConfig(image_size=32, token_size=16, embed_dim=16,
                                  depth=1, num_heads=2, mlp_ratio=2.0),
            ssl=SslConfig(prototype_count=8, mask_fraction=0.3),
            head=HeadTrainConfig(epochs=4, lr=1e-2, batch=16, num_heads=2))

    def test_config_dict_round_trip_fingerprintable(self):
        d = ablation_config_dict(AblationConfig())
        json.dumps(d, sort_keys=True)
        assert d["pretrain_steps"] == 400

    def test_smoke_run_structure(self):
        """One seed, two tiny tasks: three schema-valid rows sharing the
        exact same splits, deltas rendered on rows 2 and 3."""
        suites = {
            "g": small_suite(GLOBAL, per_class=10, seed=0),
            "l": small_suite(LOCAL, per_class=10, seed=1),
        }
        rep = run_ablation(suites, self.tiny_cfg())
        validate_report(rep)
        rows = rep["ablation_rows"]
        assert [(r["staining_aug"], r["head_mode"]) for r in rows] == [
            (False, "linear"), (True, "linear"), (True, "attnpool")]
        assert all(r["split_hashes"] == rows[0]["split_hashes"] for r in rows)
        assert "delta_rendered" in rows[1] and "delta_rendered" in rows[2]
        assert set(rows[0]["per_task_bacc"]) == {"g", "l"}
        assert rep["full_scale_context"]["rows"] == [81.3, 83.6, 86.9]

    def test_rejects_empty(self):
        with pytest.raises(ConfigError):
            run_ablation({}, self.tiny_cfg())

    def test_same_seed_reproducible(self):
        suites = {"g": small_suite(GLOBAL, per_class=10, seed=0)}
        a = run_ablation(suites, self.tiny_cfg())
        b = run_ablation(suites, self.tiny_cfg())
        assert a == b
