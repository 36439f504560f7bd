import numpy as np
import pytest

from dse import evaluation as ev
from dse.corpus import Speaker, Turn, tokenize
from dse.loss import cosine_sim


def dict_embedder(table, dim):
    """Maps each text to a fixed vector; unknown texts get a hash-seeded vector."""
    def embed(texts):
        rows = []
        for t in texts:
            if t in table:
                rows.append(np.asarray(table[t], dtype=float))
            else:
                rows.append(np.random.default_rng(abs(hash(t)) % 2**32).normal(size=dim))
        return np.stack(rows)
    return embed


def random_instance(rng, n_labels, n_queries, dim=6):
    """Random prototypes and query vectors keyed by synthetic text names."""
    table = {}
    for l in range(n_labels):
        table[f"proto{l}"] = rng.normal(size=dim)
    for q in range(n_queries):
        table[f"query{q}"] = rng.normal(size=dim)
    return table


class TestPrototypes:
    def test_one_shot_equals_support(self):
        table = {"a": [1.0, 0.0], "b": [0.0, 1.0]}
        emb = dict_embedder(table, 2)
        support = ev.LabeledSet(items=(("a", 0), ("b", 1)), label_names=("x", "y"))
        protos = ev.build_prototypes(support, emb)
        assert np.allclose(protos.vectors[0], [1, 0])
        assert np.allclose(protos.vectors[1], [0, 1])

    def test_duplication_invariant(self):
        table = {"a": [1.0, 2.0], "b": [3.0, 4.0]}
        emb = dict_embedder(table, 2)
        s1 = ev.LabeledSet(items=(("a", 0), ("b", 0)), label_names=("x",))
        s2 = ev.LabeledSet(items=(("a", 0), ("b", 0)) * 2, label_names=("x",))
        p1 = ev.build_prototypes(s1, emb)
        p2 = ev.build_prototypes(s2, emb)
        assert np.allclose(p1.vectors, p2.vectors)

    def test_mean_arithmetic(self):
        table = {"a": [1.0, 0.0], "b": [0.0, 1.0]}
        emb = dict_embedder(table, 2)
        support = ev.LabeledSet(items=(("a", 0), ("b", 0)), label_names=("x",))
        protos = ev.build_prototypes(support, emb)
        assert np.allclose(protos.vectors[0], [0.5, 0.5])

    def test_empty_support(self):
        with pytest.raises(ValueError):
            ev.build_prototypes(ev.LabeledSet(items=(), label_names=("x",)),
                                dict_embedder({}, 2))


class TestClassifyProtonet:
    def test_identical_query(self):
        table = {"a": [1.0, 0.0], "b": [0.0, 1.0]}
        emb = dict_embedder(table, 2)
        support = ev.LabeledSet(items=(("a", 0), ("b", 1)), label_names=("x", "y"))
        protos = ev.build_prototypes(support, emb)
        preds = ev.classify_protonet(["a"], protos, emb)
        assert preds[0][0] == 0
        assert preds[0][1] == pytest.approx(1.0)

    def test_single_class(self):
        table = {"a": [1.0, 0.0], "q": [0.3, -0.9]}
        emb = dict_embedder(table, 2)
        support = ev.LabeledSet(items=(("a", 0),), label_names=("x",))
        protos = ev.build_prototypes(support, emb)
        assert ev.classify_protonet(["q"], protos, emb)[0][0] == 0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        table = random_instance(rng, 10, 200)
        emb = dict_embedder(table, 6)
        support = ev.LabeledSet(items=tuple((f"proto{l}", l) for l in range(10)),
                                label_names=tuple(f"l{l}" for l in range(10)))
        protos = ev.build_prototypes(support, emb)
        queries = [f"query{q}" for q in range(200)]
        preds = ev.classify_protonet(queries, protos, emb)
        for q, (label, sim) in zip(queries, preds):
            # independent nearest-prototype scan
            best_label, best_sim = None, -2.0
            for l in range(10):
                s = cosine_sim(np.asarray(table[q]), np.asarray(table[f"proto{l}"]))
                if s > best_sim:
                    best_label, best_sim = l, s
            assert label == best_label
            assert sim == pytest.approx(best_sim)


class TestDetectOOS:
    def setup_instance(self, rng, n=40):
        table = random_instance(rng, 5, n)
        emb = dict_embedder(table, 6)
        support = ev.LabeledSet(items=tuple((f"proto{l}", l) for l in range(5)),
                                label_names=tuple(f"l{l}" for l in range(5)))
        protos = ev.build_prototypes(support, emb)
        queries = [f"query{q}" for q in range(n)]
        return emb, protos, queries

    def test_threshold_above_everything(self):
        emb, protos, queries = self.setup_instance(np.random.default_rng(1))
        preds = ev.detect_oos(queries, protos, ev.OOSConfig(), emb, threshold_override=2.0)
        assert all(p.is_oos for p in preds)

    def test_threshold_below_everything(self):
        emb, protos, queries = self.setup_instance(np.random.default_rng(2))
        preds = ev.detect_oos(queries, protos, ev.OOSConfig(), emb, threshold_override=-2.0)
        assert not any(p.is_oos for p in preds)

    def test_equal_sims_mean_rule_flags_nothing(self):
        # identical queries: every max_sim equal, sigma 0, strict < flags none
        table = {"q": [1.0, 0.0], "proto0": [1.0, 1.0]}
        emb = dict_embedder(table, 2)
        support = ev.LabeledSet(items=(("proto0", 0),), label_names=("x",))
        protos = ev.build_prototypes(support, emb)
        preds = ev.detect_oos(["q", "q", "q"], protos, ev.OOSConfig(), emb)
        assert not any(p.is_oos for p in preds)

    def test_monotone_in_threshold(self):
        emb, protos, queries = self.setup_instance(np.random.default_rng(3))
        flags = []
        for thr in (-1.0, 0.0, 0.5, 1.0):
            preds = ev.detect_oos(queries, protos, ev.OOSConfig(), emb, threshold_override=thr)
            flags.append([p.is_oos for p in preds])
        for lo, hi in zip(flags, flags[1:]):
            for a, b in zip(lo, hi):
                assert b or not a  # raising threshold never unflags

    def test_mean_minus_std_flags_fewer(self):
        emb, protos, queries = self.setup_instance(np.random.default_rng(4))
        mean_preds = ev.detect_oos(queries, protos, ev.OOSConfig(ev.ThresholdRule.MEAN), emb)
        md_preds = ev.detect_oos(queries, protos, ev.OOSConfig(ev.ThresholdRule.MEAN_MINUS_STD), emb)
        assert sum(p.is_oos for p in md_preds) <= sum(p.is_oos for p in mean_preds)

    def test_in_only_population_needs_gold(self):
        emb, protos, queries = self.setup_instance(np.random.default_rng(5))
        cfg = ev.OOSConfig(stats_population=ev.StatsPopulation.TEST_IN_ONLY)
        with pytest.raises(ValueError):
            ev.detect_oos(queries, protos, cfg, emb)

    def test_needs_two_queries(self):
        emb, protos, _ = self.setup_instance(np.random.default_rng(6))
        with pytest.raises(ValueError):
            ev.detect_oos(["query0"], protos, ev.OOSConfig(), emb)


class TestOOSMetrics:
    def test_perfect_predictor(self):
        gold = [0, 1, ev.OOS_LABEL, 2]
        preds = [
            ev.OOSPrediction(False, 0, 0.9),
            ev.OOSPrediction(False, 1, 0.9),
            ev.OOSPrediction(True, None, 0.1),
            ev.OOSPrediction(False, 2, 0.9),
        ]
        report = ev.oos_metrics(gold, preds)
        assert all(v == 1.0 for v in report.metrics.values())

    def test_flag_everything(self):
        gold = [0] * 8 + [ev.OOS_LABEL] * 2  # 20% OOS
        preds = [ev.OOSPrediction(True, None, 0.0)] * 10
        report = ev.oos_metrics(gold, preds)
        assert report.metrics["OOS-Recall"] == 1.0
        assert report.metrics["OOS-Accuracy"] == pytest.approx(0.2)
        assert report.metrics["In-Accuracy"] == 0.0

    def test_matches_confusion_matrix_oracle(self):
        rng = np.random.default_rng(7)
        n = 500
        gold = [int(g) if g < 5 else ev.OOS_LABEL for g in rng.integers(0, 6, size=n)]
        preds = [
            ev.OOSPrediction(bool(rng.random() < 0.3),
                             int(rng.integers(0, 5)), float(rng.random()))
            for _ in range(n)
        ]
        preds = [ev.OOSPrediction(p.is_oos, None if p.is_oos else p.label, p.max_sim) for p in preds]
        report = ev.oos_metrics(gold, preds)
        # independent recount
        acc = sum(
            1 for g, p in zip(gold, preds)
            if (g == ev.OOS_LABEL and p.is_oos) or (g != ev.OOS_LABEL and not p.is_oos and p.label == g)
        ) / n
        in_idx = [i for i in range(n) if gold[i] != ev.OOS_LABEL]
        in_acc = sum(1 for i in in_idx if not preds[i].is_oos and preds[i].label == gold[i]) / len(in_idx)
        bin_acc = sum(1 for g, p in zip(gold, preds) if (g == ev.OOS_LABEL) == p.is_oos) / n
        oos_idx = [i for i in range(n) if gold[i] == ev.OOS_LABEL]
        recall = sum(1 for i in oos_idx if preds[i].is_oos) / len(oos_idx)
        assert report.metrics["Accuracy"] == pytest.approx(acc)
        assert report.metrics["In-Accuracy"] == pytest.approx(in_acc)
        assert report.metrics["OOS-Accuracy"] == pytest.approx(bin_acc)
        assert report.metrics["OOS-Recall"] == pytest.approx(recall)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ev.oos_metrics([0], [])


class TestRankTopk:
    def make_pool(self, rng, n):
        table = {f"resp{i}": rng.normal(size=5) for i in range(n)}
        table.update({f"q{i}": rng.normal(size=5) for i in range(n)})
        return table

    def test_k_equals_n_candidates(self):
        rng = np.random.default_rng(8)
        table = self.make_pool(rng, 30)
        emb = dict_embedder(table, 5)
        queries = [f"q{i}" for i in range(10)]
        golds = [f"resp{i}" for i in range(10)]
        pool = [f"resp{i}" for i in range(30)]
        report = ev.rank_topk(queries, golds, pool, emb, k_values=(20,), n_candidates=20, seed=0)
        assert report.metrics["Top-20"] == 1.0

    def test_gold_identical_to_query(self):
        rng = np.random.default_rng(9)
        table = self.make_pool(rng, 30)
        emb = dict_embedder(table, 5)
        report = ev.rank_topk(["resp0"], ["resp0"], [f"resp{i}" for i in range(30)], emb,
                              k_values=(1,), n_candidates=10, seed=0)
        assert report.metrics["Top-1"] == 1.0

    def test_pool_too_small(self):
        rng = np.random.default_rng(10)
        table = self.make_pool(rng, 5)
        emb = dict_embedder(table, 5)
        with pytest.raises(ValueError):
            ev.rank_topk(["q0"], ["resp0"], [f"resp{i}" for i in range(5)], emb,
                         n_candidates=100, seed=0)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(11)
        table = self.make_pool(rng, 60)
        emb = dict_embedder(table, 5)
        queries = [f"q{i}" for i in range(40)]
        golds = [f"resp{i}" for i in range(40)]
        pool = [f"resp{i}" for i in range(60)]
        report = ev.rank_topk(queries, golds, pool, emb, k_values=(1, 3, 10, 50), n_candidates=50, seed=2)
        vals = [report.metrics[f"Top-{k}"] for k in (1, 3, 10, 50)]
        assert vals == sorted(vals)
        assert vals[-1] == 1.0

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(12)
        table = self.make_pool(rng, 80)
        emb = dict_embedder(table, 5)
        n_q = 200
        table.update({f"q{i}": rng.normal(size=5) for i in range(n_q)})
        queries = [f"q{i}" for i in range(n_q)]
        golds = [f"resp{i % 80}" for i in range(n_q)]
        pool = [f"resp{i}" for i in range(80)]
        # reproduce the sampling stream, then rank with an independent sort
        check_rng = np.random.default_rng(3)
        expect_hits = {1: 0, 3: 0, 10: 0}
        for qi in range(n_q):
            gold = golds[qi]
            available = [t for t in pool if t != gold]
            chosen = check_rng.choice(len(available), size=29, replace=False)
            cands = [gold] + [available[c] for c in chosen]
            sims = [cosine_sim(table[queries[qi]], np.asarray(table[c])) for c in cands]
            order = sorted(range(len(cands)), key=lambda i: (-sims[i], i == 0))  # gold last on ties
            rank = order.index(0) + 1
            for k in expect_hits:
                if rank <= k:
                    expect_hits[k] += 1
        report = ev.rank_topk(queries, golds, pool, emb, k_values=(1, 3, 10), n_candidates=30, seed=3)
        for k in (1, 3, 10):
            assert report.metrics[f"Top-{k}"] == pytest.approx(expect_hits[k] / n_q)


class TestNLIProbe:
    def test_entailment_equals_anchor(self):
        table = {"a": [1.0, 0.0], "c": [0.0, 1.0]}
        emb = dict_embedder(table, 2)
        assert ev.nli_probe([("a", "a", "c")], emb) == 1.0

    def test_tie_counts_incorrect(self):
        table = {"a": [1.0, 0.0], "e": [0.5, 0.5]}
        emb = dict_embedder(table, 2)
        assert ev.nli_probe([("a", "e", "e")], emb) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(13)
        table = {f"t{i}": rng.normal(size=4) for i in range(300)}
        emb = dict_embedder(table, 4)
        triples = [(f"t{3*i}", f"t{3*i+1}", f"t{3*i+2}") for i in range(100)]
        got = ev.nli_probe(triples, emb)
        want = np.mean([
            1.0 if cosine_sim(table[a], np.asarray(table[e])) > cosine_sim(table[a], np.asarray(table[c]))
            else 0.0
            for a, e, c in triples
        ])
        assert got == pytest.approx(want)


class TestDialogueHistory:
    def test_paper_example(self):
        turns = [
            Turn(Speaker.SYS, "hi"),
            Turn(Speaker.USR, "how are you?"),
            Turn(Speaker.SYS, "I'm good"),
        ]
        assert ev.format_dialogue_history(turns) == "[SYS] hi [USR] how are you? [SYS] I'm good"

    def test_no_truncation_when_short(self):
        turns = [Turn(Speaker.USR, "hello there")]
        assert ev.format_dialogue_history(turns, max_tokens=32) == "[USR] hello there"

    def test_head_truncation_keeps_recent_tokens(self):
        turns = [Turn(Speaker.USR, " ".join(f"w{i}" for i in range(99)))]
        full = ev.format_dialogue_history(turns, max_tokens=1000)
        out = ev.format_dialogue_history(turns, max_tokens=32)
        full_ids = tokenize(full, 1000, 0).ids
        out_ids = tokenize(out, 1000, 0).ids
        assert len(out_ids) == 32
        assert out_ids == full_ids[-32:]

    def test_empty(self):
        with pytest.raises(ValueError):
            ev.format_dialogue_history([])


class TestActionProbe:
    def make_data(self, rng, n=20, dim=4, labels=2):
        table = {}
        data = []
        W_true = rng.normal(size=(dim, labels))
        for i in range(n):
            x = rng.normal(size=dim)
            table[f"x{i}"] = x
            y = (x @ W_true > 0).astype(np.int8)
            data.append((f"x{i}", y))
        return table, data

    def test_bce_decreases(self):
        rng = np.random.default_rng(14)
        table, data = self.make_data(rng)
        emb = dict_embedder(table, 4)
        probe = ev.train_action_probe(data, emb, num_labels=2, epochs=50, lr=5.0)
        assert all(b <= a + 1e-12 for a, b in zip(probe.losses, probe.losses[1:]))
        assert probe.losses[-1] < probe.losses[0]

    def test_zero_epochs_predicts_half(self):
        rng = np.random.default_rng(15)
        table, data = self.make_data(rng)
        emb = dict_embedder(table, 4)
        probe = ev.train_action_probe(data, emb, num_labels=2, epochs=0)
        X = emb([t for t, _ in data])
        scores = ev._sigmoid(X @ probe.W + probe.b)
        assert np.all(scores == 0.5)

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(16)
        X = rng.normal(size=(5, 3))
        Y = rng.integers(0, 2, size=(5, 2)).astype(float)
        W = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        loss, dW, db = ev.probe_loss_and_grad(X, Y, W, b)
        h = 1e-6
        for i in range(3):
            for j in range(2):
                Wp, Wm = W.copy(), W.copy()
                Wp[i, j] += h
                Wm[i, j] -= h
                fd = (ev.probe_loss_and_grad(X, Y, Wp, b)[0] - ev.probe_loss_and_grad(X, Y, Wm, b)[0]) / (2 * h)
                assert abs(dW[i, j] - fd) / max(abs(fd), 1e-6) < 1e-4
        for j in range(2):
            bp, bm = b.copy(), b.copy()
            bp[j] += h
            bm[j] -= h
            fd = (ev.probe_loss_and_grad(X, Y, W, bp)[0] - ev.probe_loss_and_grad(X, Y, W, bm)[0]) / (2 * h)
            assert abs(db[j] - fd) / max(abs(fd), 1e-6) < 1e-4


class TestF1:
    def test_perfect(self):
        gold = np.array([[1, 0], [0, 1], [1, 1]])
        assert ev.f1_scores(gold, gold) == (1.0, 1.0)

    def test_all_missed(self):
        gold = np.array([[1, 0]] * 5)
        pred = np.zeros_like(gold)
        micro, macro = ev.f1_scores(gold, pred)
        assert micro == 0.0
        assert macro == pytest.approx(0.5)  # label 1 has no gold and no preds -> 1

    def test_matches_confusion_oracle(self):
        rng = np.random.default_rng(17)
        gold = rng.integers(0, 2, size=(50, 3))
        pred = rng.integers(0, 2, size=(50, 3))
        micro, macro = ev.f1_scores(gold, pred)
        tp = fp = fn = 0
        per = []
        for l in range(3):
            t = int(((gold[:, l] == 1) & (pred[:, l] == 1)).sum())
            p = int(((gold[:, l] == 0) & (pred[:, l] == 1)).sum())
            n = int(((gold[:, l] == 1) & (pred[:, l] == 0)).sum())
            tp, fp, fn = tp + t, fp + p, fn + n
            if t == 0 and p == 0 and n == 0:
                per.append(1.0)
            elif t == 0:
                per.append(0.0)
            else:
                per.append(2 * t / (2 * t + p + n))
        assert micro == pytest.approx(2 * tp / (2 * tp + fp + fn))
        assert macro == pytest.approx(float(np.mean(per)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ev.f1_scores(np.zeros((2, 2)), np.zeros((3, 2)))


class TestFewShotSampling:
    def make_set(self, per_label=4, labels=3):
        items = tuple(
            (f"text_{l}_{i}", l) for l in range(labels) for i in range(per_label)
        )
        return ev.LabeledSet(items=items, label_names=tuple(f"l{i}" for i in range(labels)))

    def test_one_shot_partitions_two_item_set(self):
        full = self.make_set(per_label=2)
        support, val = ev.sample_few_shot(full, 1, seed=0)
        assert sorted(support.items + val.items) == sorted(full.items)

    def test_disjoint(self):
        full = self.make_set(per_label=6)
        for seed in range(10):
            support, val = ev.sample_few_shot(full, 2, seed)
            assert not set(support.items) & set(val.items)

    def test_deterministic_and_seed_sensitive(self):
        full = self.make_set(per_label=8)
        a1 = ev.sample_few_shot(full, 2, seed=1)
        a2 = ev.sample_few_shot(full, 2, seed=1)
        b = ev.sample_few_shot(full, 2, seed=2)
        assert a1 == a2
        assert a1 != b

    def test_insufficient_items_names_label(self):
        full = self.make_set(per_label=3)
        with pytest.raises(ValueError, match="l0"):
            ev.sample_few_shot(full, 2, seed=0)


class TestReportsAndEmbeddingIO:
    def test_report_json_roundtrip(self):
        r = ev.EvalReport(task="t", metrics={"Accuracy": 0.5}, support=10, seed=3)
        r2 = ev.EvalReport.from_json(r.to_json())
        assert r2.task == r.task and r2.metrics == r.metrics and r2.support == 10 and r2.seed == 3

    def test_embedding_roundtrip_bytes(self, tmp_path):
        rng = np.random.default_rng(18)
        emb = rng.normal(size=(5, 3)).astype(np.float32)
        texts = [f"text {i}" for i in range(5)]
        p1, s1 = tmp_path / "e1.txt", tmp_path / "e1.texts"
        p2, s2 = tmp_path / "e2.txt", tmp_path / "e2.texts"
        ev.save_embeddings(emb, texts, p1, s1)
        loaded = ev.load_embeddings(p1)
        ev.save_embeddings(loaded, texts, p2, s2)
        assert p1.read_bytes() == p2.read_bytes()
        assert s1.read_bytes() == s2.read_bytes()
        assert np.allclose(loaded, emb)

    def test_embedding_bad_header(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("nonsense\n")
        with pytest.raises(ev.EmbeddingFileError):
            ev.load_embeddings(p)

    def test_embedding_row_count_mismatch(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("2 2\n1.0 2.0\n")
        with pytest.raises(ev.EmbeddingFileError):
            ev.load_embeddings(p)


class TestLoaders:
    def test_labeled_tsv(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("hello\tgreet\nbye\tfarewell\nhi\tgreet\n")
        ls = ev.load_labeled_tsv(p)
        assert ls.label_names == ("farewell", "greet")
        assert ls.items[0] == ("hello", 1)

    def test_multilabel_tsv(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("a\tx,y\nb\ty\n")
        items, names = ev.load_multilabel_tsv(p)
        assert names == ["x", "y"]
        assert items[0][1].tolist() == [1, 1]
        assert items[1][1].tolist() == [0, 1]

    def test_nli_tsv(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("a\te\tc\n")
        assert ev.load_nli_tsv(p) == [("a", "e", "c")]
