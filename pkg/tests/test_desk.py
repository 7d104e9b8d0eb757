"""Directional properties checked on the shared desk experiment."""

import desk


def test_discriminator_accuracy_drops_under_adversary(desk_results):
    for base, adf in zip(desk_results["baseline"], desk_results["adfair"]):
        assert adf["disc_acc"] < base["disc_acc"]


def test_attribute_probe_lower_for_adversarial_checkpoint(desk_results):
    for base, adf in zip(desk_results["baseline"], desk_results["adfair"]):
        assert base["attr_probe"] > 100 / 3
        assert adf["attr_probe"] < base["attr_probe"]


def test_few_shot_not_worse_than_zero_shot(desk_results):
    for arm in desk.ARMS:
        assert desk.mean(desk_results, arm, "few_shot", "acc") >= \
            desk.mean(desk_results, arm, "zero_shot", "acc")


def test_runs_fit_desk_budget(desk_results):
    assert max(r["train_s"] for runs in desk_results.values() for r in runs) < 300
