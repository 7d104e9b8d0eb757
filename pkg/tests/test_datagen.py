import json

import numpy as np
import pytest

from adfair import datagen as D
from adfair.evalharness import fit_linear_probe


def small(**kw):
    base = dict(n_train=300, n_val=50, n_test_pool=1500, test_per_cell=6)
    return D.preset("cxp-analog", **{**base, **kw})


def probe_acc(ds_train, ds_eval, C):
    probe = fit_linear_probe(ds_train.images, ds_train.group, C, steps=300, lr=0.5)
    return float(np.mean(np.argmax(probe.scores(ds_eval.images), axis=1) == ds_eval.group) * 100)


class TestConfig:
    def test_bad_marginals(self):
        with pytest.raises(D.GenConfigError):
            D.GenConfig(group_marginals=[0.5, 0.4, 0.2])

    def test_bad_prevalence_row(self):
        with pytest.raises(D.GenConfigError):
            D.GenConfig(C_cls=2, C_attr=2, group_marginals=[0.5, 0.5],
                        prevalence=[[0.5, 0.5], [0.6, 0.5]])

    def test_negative_leak(self):
        with pytest.raises(D.GenConfigError):
            D.GenConfig(leak_img=-0.1)

    def test_unknown_preset(self):
        with pytest.raises(D.GenConfigError, match="cxp-analog"):
            D.preset("chexpert")

    def test_presets_differ(self):
        a, b = D.preset("cxp-analog"), D.preset("mimic-analog")
        assert a.seed != b.seed and a.prevalence != b.prevalence
        assert a.n_train == 2000 and a.group_marginals == [0.7, 0.2, 0.1]


class TestGenerate:
    def test_bit_identical(self):
        a, b = D.generate(small()), D.generate(small())
        for k in D.SPLITS:
            assert a.splits[k].images.tobytes() == b.splits[k].images.tobytes()
            assert a.splits[k].tokens.tobytes() == b.splits[k].tokens.tobytes()

    def test_record_invariants(self):
        data = D.generate(small())
        tr = data.splits["train"]
        assert tr.masks.sum(axis=1).min() >= 1
        assert set(np.unique(tr.masks)) <= {0.0, 1.0}
        # masked token slots are zero
        assert not tr.tokens[tr.masks == 0].any()
        ids = np.concatenate([data.splits[k].sample_id for k in ("train", "val", "test_pool")])
        assert np.unique(ids).size == ids.size
        rec = next(iter(tr.records()))
        assert rec.img_feat.shape == (32,) and rec.txt_tokens.shape == (8, 16)

    def test_group_counts_within_three_sigma(self):
        cfg = D.GenConfig(n_train=10000, n_val=1, n_test_pool=200, test_per_cell=1, seed=4)
        g = D.generate(cfg).splits["train"].group
        p = np.array(cfg.group_marginals)
        counts = np.bincount(g, minlength=3)
        sigma = np.sqrt(10000 * p * (1 - p))
        assert np.all(np.abs(counts - 10000 * p) < 3 * sigma)

    def test_uniform_prevalence_gives_uniform_labels(self):
        cfg = D.GenConfig(n_train=20000, n_val=1, n_test_pool=200, test_per_cell=1, seed=6)
        data = D.generate(cfg).splits["train"]
        for g in range(3):
            frac = np.bincount(data.label[data.group == g], minlength=5) / np.sum(data.group == g)
            n = np.sum(data.group == g)
            assert np.all(np.abs(frac - 0.2) < 4 * np.sqrt(0.16 / n))

    def test_prompts_are_noise_free_class_centres(self):
        data = D.generate(small())
        b_cls = D.direction_bases(data.config)[2]
        assert data.prompts.tokens.shape == (5, 8, 16)
        np.testing.assert_array_equal(data.prompts.tokens[:, 3], b_cls)
        assert data.prompts.masks.all()

    def test_zero_leak_probe_at_chance(self):
        cfg = D.GenConfig(n_train=2000, n_val=1, n_test_pool=2000, test_per_cell=1,
                          leak_img=0.0, leak_txt=0.0, seed=8)
        data = D.generate(cfg)
        acc = probe_acc(data.splits["train"], data.splits["test_pool"], 3)
        chance = 100 * np.max(np.bincount(data.splits["test_pool"].group)) / 2000
        assert abs(acc - chance) < 5

    def test_probe_rises_with_leak(self):
        accs = []
        for leak in (0.0, 0.5, 1.0, 2.0):
            per_seed = []
            for seed in range(3):
                data = D.generate(D.preset("cxp-analog", n_val=1, n_test_pool=1000,
                                           test_per_cell=1, leak_img=leak, seed=seed))
                per_seed.append(probe_acc(data.splits["train"], data.splits["test_pool"], 3))
            accs.append(np.mean(per_seed))
        assert all(b > a for a, b in zip(accs, accs[1:])), accs


class TestBalancedSample:
    def test_counts(self):
        data = D.generate(small())
        test = data.splits["test"]
        assert len(test) == 6 * 5 * 3
        for c in range(5):
            assert np.bincount(test.group[test.label == c], minlength=3).tolist() == [6, 6, 6]

    def test_full_scale_shape(self):
        pool = D.generate(small(n_test_pool=6000)).splits["test_pool"]
        test = D.balanced_test_sample(pool, 30, 5, 3, seed=1)
        assert len(test) == 450 and np.all(np.bincount(test.label) == 90)

    def test_deficient_cell_named(self):
        pool = D.generate(small()).splits["train"]
        with pytest.raises(D.CellPopulationError, match=r"cell \(class=\d, group=\d\) has \d+ samples"):
            D.balanced_test_sample(pool, 60, 5, 3)


class TestFiles:
    def test_round_trip(self, tmp_path):
        data = D.generate(small())
        D.write_dataset(tmp_path, data)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["seed"] == data.config.seed
        back = D.read_dataset(tmp_path)
        for k in D.SPLITS:
            a, b = data.splits[k], back.splits[k]
            np.testing.assert_array_equal(a.sample_id, b.sample_id)
            np.testing.assert_allclose(b.images, a.images, rtol=1e-8, atol=1e-9)
            np.testing.assert_allclose(b.tokens, a.tokens, rtol=1e-8, atol=1e-9)
            np.testing.assert_array_equal(b.masks, a.masks)
        np.testing.assert_allclose(back.prompts.tokens, data.prompts.tokens, rtol=1e-8)

    def test_header_layout(self, tmp_path):
        D.write_dataset(tmp_path, D.generate(small()))
        header = (tmp_path / "train.csv").read_text().split("\n", 1)[0].split(",")
        assert header[:4] == ["sample_id", "group", "label", "v_0"]
        assert header[3 + 32] == "t_0_0" and header[-1] == "m_7"
        assert len(header) == 3 + 32 + 8 * 16 + 8

    def test_writes_are_deterministic(self, tmp_path):
        D.write_dataset(tmp_path / "a", D.generate(small()))
        D.write_dataset(tmp_path / "b", D.generate(small()))
        for f in ("manifest.json", "train.csv", "test.csv", "prompts.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
