import math

import pytest

import modpipe


def test_fnv_vectors():
    assert modpipe.fnv1a64(b"") == 0xCBF29CE484222325
    assert modpipe.fnv1a64("a") == 0xAF63DC4C8601EC8C
    assert modpipe.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_cache_key_depends_on_sensitivity():
    k3 = modpipe.cache_key(b"text\nhello", '{"d":"x"}', 3)
    k4 = modpipe.cache_key(b"text\nhello", '{"d":"x"}', 4)
    assert k3 != k4
    assert k3 == modpipe.fnv1a64(b"text\nhello") ^ modpipe.fnv1a64('{"d":"x"}') ^ modpipe.fnv1a64("3")


def test_call_counts_and_latency():
    worst = {"N": 25, "N_t": 25, "N_p": 25, "M_t": 25, "M_p": 25, "K": 3}
    assert modpipe.call_counts(worst)["T_total"] == 250
    assert modpipe.pruning_savings(9, 3) == pytest.approx(2 / 3)
    report = modpipe.simulate_latency(worst)
    assert 5.0 <= report["critical_path_s"] <= 15.0
    assert modpipe.simulate_latency(worst, concurrency=1, workers=1)["critical_path_s"] == pytest.approx(181.25)


def test_alignment():
    assert modpipe.sigmoid(0.53) == pytest.approx(0.6295, abs=1e-4)
    fit = modpipe.fit_intercept_logistic([True] * 630 + [False] * 370)
    assert fit["log_odds"] == pytest.approx(math.log(630 / 370), abs=1e-9)
    assert modpipe.logit(fit["probability"]) == pytest.approx(fit["log_odds"])
    report = modpipe.alignment_report([{"system_choice_favored": True, "modality": "text"},
                                       {"system_choice_favored": False, "modality": "text"}])
    assert report["overall"]["probability"] == pytest.approx(0.5)


def test_weights_and_backoff():
    assert [modpipe.loser_weight(m) for m in (0.06, 0.5, 0.9, 2.0)] == pytest.approx([0.94, 0.5, 0.1, 0.1])
    assert [modpipe.backoff_base(i) for i in range(5)] == [4000, 2000, 1000, 500, 500]


def test_feed_and_cascade():
    feed = modpipe.generate_feed(posts=5, match_rate=1.0, seed=3)
    assert len(feed) == 5
    assert feed == modpipe.generate_feed(posts=5, match_rate=1.0, seed=3)
    flt = {"id": "f", "description": "graphic violence, blood and weapons", "sensitivity": 5,
           "modality": "Both", "duration": {"kind": "Never"}, "metadata": {}, "created_at": 0}
    result = modpipe.select_intervention(feed[0], flt, k=3)
    assert len(result["candidates"]) == 3
    assert result["calls"]["image_match"] == 1
    assert result["winner"] == max(result["candidates"], key=lambda c: c["total"])["kind"]


def test_training_round_trip():
    sft = []
    for i in range(40):
        sens = (i % 10) / 10 + 0.05
        sal = ((i * 7) % 10) / 10 + 0.05
        sft.append({"context": [sens, sal, 0.5, 0.5, 1.0], "label": "Blur" if sens < 0.5 else "Occlusion"})
    m1 = modpipe.train(1, sft, {"n_rounds": 10})
    assert m1["provenance"] == "Phase1"
    assert modpipe.predict(m1, [0.1, 0.5, 0.5, 0.5, 1.0])["kind"] == "Blur"
    pairs = modpipe.generate_preference_pairs(sft, ["Blur", "Occlusion", "Shrink"])
    assert all(p["source"] == "Automated" for p in pairs)
    assert modpipe.generate_preference_pairs(sft, ["Blur", "Occlusion"], epsilon=float("inf")) == []
    m2 = modpipe.train(2, pairs, {"n_rounds": 5})
    human = [{"context": [0.9, 0.9, 0.5, 0.5, 1.0], "winner": "Shrink", "loser": "Occlusion", "source": "Human"}]
    m3 = modpipe.train(3, human, {"n_rounds": 3}, base=m2)
    assert m3["provenance"] == "Phase3"
    assert len(m3["rounds"]) == len(m2["rounds"]) + 3


def test_errors_are_mapped():
    with pytest.raises(modpipe.ValidationError):
        modpipe.train(3, [], None, base=modpipe.train(1, [{"context": [0, 0, 0, 0, 0], "label": "Blur"}]))
    with pytest.raises(modpipe.ModpipeError):
        modpipe.pruning_savings(3, 9)
