import numpy as np
import pytest

from lungsound import stacker as S
from lungsound.errors import ConfigError, ContractError, DataError, IntegrityError


def toy_cohort(rng, n_patients=20, events_per=4):
    """Patients in two strata plus per-event patient ids."""
    strata = {f"p{i:02d}": ("A" if i % 2 == 0 else "B") for i in range(n_patients)}
    event_ids, patient_of_event = [], []
    for pid in sorted(strata):
        for j in range(events_per):
            event_ids.append(f"{pid}-e{j}")
            patient_of_event.append(pid)
    return strata, event_ids, patient_of_event


class TestFoldAssignment:
    def test_every_patient_assigned_once(self, rng):
        strata, _, _ = toy_cohort(rng)
        folds = S.assign_folds(strata, k=5, seed=0)
        assert set(folds.assignment) == set(strata)
        assert all(0 <= f < 5 for f in folds.assignment.values())

    def test_balanced_within_stratum(self, rng):
        strata = {f"p{i}": "A" for i in range(25)}
        folds = S.assign_folds(strata, k=5, seed=1)
        counts = np.bincount(list(folds.assignment.values()), minlength=5)
        assert np.all(counts == 5)

    def test_global_cursor_balances_across_strata(self):
        # two strata of 5 under k=5: union must still be balanced 2 per fold
        strata = {f"a{i}": "A" for i in range(5)}
        strata.update({f"b{i}": "B" for i in range(5)})
        folds = S.assign_folds(strata, k=5, seed=3)
        counts = np.bincount(list(folds.assignment.values()), minlength=5)
        assert np.all(counts == 2)

    def test_deterministic(self, rng):
        strata, _, _ = toy_cohort(rng)
        a = S.assign_folds(strata, k=4, seed=7)
        b = S.assign_folds(strata, k=4, seed=7)
        assert a.assignment == b.assignment

    def test_small_stratum_warns(self):
        strata = {"p1": "A", "p2": "A", "p3": "A", "p4": "A", "p5": "A", "lone": "B"}
        folds = S.assign_folds(strata, k=3, seed=0)
        assert any("B" in w for w in folds.warnings)

    def test_k_validation(self):
        with pytest.raises(ConfigError):
            S.FoldAssignment(k=1, assignment={"p": 0}, seed=0)

    def test_missing_patient_rejected(self, rng):
        strata, _, _ = toy_cohort(rng)
        folds = S.assign_folds(strata, k=3, seed=0)
        with pytest.raises(IntegrityError):
            folds.fold_of("ghost")

    def test_roundtrip(self, tmp_path, rng):
        strata, _, _ = toy_cohort(rng)
        folds = S.assign_folds(strata, k=3, seed=0)
        path = tmp_path / "folds.json"
        folds.save(path)
        loaded = S.FoldAssignment.load(path)
        assert loaded.assignment == folds.assignment
        assert loaded.k == folds.k


class TestOOF:
    def _run(self, rng, k=4, sabotage=False):
        strata, event_ids, patient_of_event = toy_cohort(rng, n_patients=12)
        folds = S.assign_folds(strata, k=k, seed=0)
        calls = []

        def train_predict(task_id, train_idx, predict_idx):
            calls.append((task_id, np.array(train_idx), np.array(predict_idx)))
            out = np.zeros((len(predict_idx), 3))
            out[:, 0] = 1.0
            if sabotage:
                # leak: pretend the model trained on everything
                calls[-1] = (task_id, np.arange(len(event_ids)), np.array(predict_idx))
            return out

        probs, audit = S.generate_oof_probabilities(
            folds, event_ids, patient_of_event, ["sound_pattern"], train_predict
        )
        return folds, event_ids, patient_of_event, probs, audit, calls

    def test_every_event_scored_exactly_once(self, rng):
        _, event_ids, _, probs, audit, _ = self._run(rng)
        assert probs["sound_pattern"].shape == (len(event_ids), 3)
        assert not np.isnan(probs["sound_pattern"]).any()
        assert len(audit) == len(event_ids)
        assert len({row["event_id"] for row in audit}) == len(event_ids)

    def test_training_rows_exclude_scored_fold(self, rng):
        folds, event_ids, patient_of_event, _, audit, calls = self._run(rng)
        fold_of_event = {
            eid: folds.fold_of(pid) for eid, pid in zip(event_ids, patient_of_event)
        }
        for task_id, train_idx, predict_idx in calls:
            predicted_folds = {fold_of_event[event_ids[i]] for i in predict_idx}
            assert len(predicted_folds) == 1
            held_out = predicted_folds.pop()
            trained_folds = {fold_of_event[event_ids[i]] for i in train_idx}
            assert held_out not in trained_folds

    def test_audit_passes_clean_run(self, rng):
        _, _, _, _, audit, _ = self._run(rng)
        S.verify_oof_audit(audit)

    def test_tampered_audit_detected(self, rng):
        _, _, _, _, audit, _ = self._run(rng)
        bad = [dict(row) for row in audit]
        bad[3]["model_folds"] = sorted(set(bad[3]["model_folds"]) | {bad[3]["fold"]})
        with pytest.raises(IntegrityError):
            S.verify_oof_audit(bad)


class TestOOFMatrixIO:
    def test_roundtrip(self, tmp_path, rng, random_simplex):
        n = 17
        event_ids = [f"e{i:03d}" for i in range(n)]
        event_folds = [int(rng.integers(0, 5)) for _ in range(n)]
        sp = random_simplex(n, 3)
        scr = random_simplex(n, 2)
        dg = random_simplex(n, 4)
        path = tmp_path / "oof.csv"
        S.save_oof_matrix(path, event_ids, event_folds, sp, scr, dg)

        header = path.read_text().splitlines()[0]
        assert header.split(",")[:2] == ["event_id", "fold"]
        assert tuple(header.split(",")[2:]) == S.OOF_PROB_COLUMNS

        ids2, folds2, sp2, scr2, dg2 = S.load_oof_matrix(path)
        assert ids2 == event_ids
        assert list(folds2) == event_folds
        # repr round trip is exact
        assert np.array_equal(sp2, sp)
        assert np.array_equal(scr2, scr)
        assert np.array_equal(dg2, dg)

    def test_header_mismatch_rejected(self, tmp_path):
        path = tmp_path / "oof.csv"
        path.write_text("event_id,fold,wrong\ne1,0,0.5\n")
        with pytest.raises(DataError):
            S.load_oof_matrix(path)


class TestMetaFeatures:
    def test_layout_and_values(self, random_simplex):
        sp = random_simplex(5, 3)
        scr = random_simplex(5, 2)
        dg = random_simplex(5, 4)
        ages = [1.5, 2.0, 3.5, 10.0, 16.0]
        sexes = ["male", "female", "male", "female", "male"]
        locations = ["p1", "p2", "p3", "p4", "p2"]
        X, names = S.build_meta_features(sp, scr, dg, ages, sexes, locations)
        assert names == S.META_FEATURE_NAMES
        assert X.shape == (5, 11)
        np.testing.assert_allclose(X[:, 0:3], sp)
        np.testing.assert_allclose(X[:, 3], scr[:, 1])  # abnormal column
        np.testing.assert_allclose(X[:, 4:8], dg)
        np.testing.assert_allclose(X[:, 8], ages)
        np.testing.assert_allclose(X[:, 9], [1, 0, 1, 0, 1])
        np.testing.assert_allclose(X[:, 10], [1, 2, 3, 4, 2])

    def test_twelve_column_variant(self, random_simplex):
        sp, scr, dg = random_simplex(3, 3), random_simplex(3, 2), random_simplex(3, 4)
        X, names = S.build_meta_features(
            sp, scr, dg, [1, 2, 3], ["male"] * 3, ["p1"] * 3,
            include_screening_normal=True,
        )
        assert X.shape == (3, 12)
        assert "scr_normal" in names
        i = names.index("scr_normal")
        np.testing.assert_allclose(X[:, i], scr[:, 0])

    def test_row_order_follows_input_order(self, random_simplex):
        sp, scr, dg = random_simplex(4, 3), random_simplex(4, 2), random_simplex(4, 4)
        ages = [1.0, 2.0, 3.0, 4.0]
        X1, _ = S.build_meta_features(sp, scr, dg, ages, ["male"] * 4, ["p1"] * 4)
        perm = [2, 0, 3, 1]
        X2, _ = S.build_meta_features(
            sp[perm], scr[perm], dg[perm],
            [ages[i] for i in perm], ["male"] * 4, ["p1"] * 4,
        )
        np.testing.assert_allclose(X2, X1[perm])

    def test_non_simplex_rejected(self, random_simplex):
        sp = random_simplex(3, 3)
        sp[0] *= 2.0
        with pytest.raises(ContractError):
            S.build_meta_features(
                sp, random_simplex(3, 2), random_simplex(3, 4),
                [1, 2, 3], ["male"] * 3, ["p1"] * 3,
            )

    def test_unknown_sex_rejected(self, random_simplex):
        with pytest.raises(DataError):
            S.build_meta_features(
                random_simplex(1, 3), random_simplex(1, 2), random_simplex(1, 4),
                [1.0], ["other"], ["p1"],
            )


class TestHyperparameterSpace:
    def test_default_ranges(self):
        space = S.HyperparameterSpace()
        assert space.n_estimators == (50, 500)
        assert space.max_depth == (3, 15)
        assert space.learning_rate == (0.01, 0.3)
        assert space.num_leaves == (15, 300)
        assert space.min_child_samples == (5, 100)
        assert space.subsample == (0.6, 1.0)
        assert space.colsample == (0.6, 1.0)
        assert space.early_stopping_rounds == 20
        assert space.n_trials == 100

    def test_defaults_inside_ranges(self):
        space = S.HyperparameterSpace()
        defaults = space.defaults()
        for spec in space.param_specs():
            value = defaults[spec.name]
            assert spec.low <= value <= spec.high, spec.name

    def test_sampling_respects_bounds(self):
        space = S.HyperparameterSpace(n_trials=30)
        search = S.SequentialSearch(space.param_specs(), seed=0)
        for trial in range(30):
            params = search.suggest()
            for spec in space.param_specs():
                assert spec.low <= params[spec.name] <= spec.high, spec.name
            assert isinstance(params["n_estimators"], int)
            assert isinstance(params["max_depth"], int)
            # feed a synthetic objective so the model-based phase engages
            search.observe(params, -abs(params["learning_rate"] - 0.05))

    def test_search_concentrates_after_startup(self):
        # the guided phase should sample near the planted optimum more often
        space = S.HyperparameterSpace(n_trials=60)
        search = S.SequentialSearch(space.param_specs(), seed=1)
        seen = []
        for _ in range(60):
            params = search.suggest()
            seen.append(params["learning_rate"])
            search.observe(params, -abs(np.log(params["learning_rate"]) - np.log(0.05)))
        early = np.mean(np.abs(np.log(seen[:15]) - np.log(0.05)))
        late = np.mean(np.abs(np.log(seen[-15:]) - np.log(0.05)))
        assert late < early


class TestMetaModel:
    def _planted(self, rng, n=240):
        """Meta features where sp columns carry all the signal."""
        y = rng.integers(0, 3, n)
        sp = np.full((n, 3), 0.1)
        sp[np.arange(n), y] = 0.8
        sp += rng.uniform(0, 0.05, sp.shape)
        sp /= sp.sum(axis=1, keepdims=True)
        scr = rng.dirichlet(np.ones(2), n)
        dg = rng.dirichlet(np.ones(4), n)
        ages = rng.uniform(0.5, 16, n)
        sexes = ["male" if i % 2 else "female" for i in range(n)]
        locations = [f"p{1 + i % 4}" for i in range(n)]
        X, names = S.build_meta_features(sp, scr, dg, ages, sexes, locations)
        groups = [f"p{i // 4}" for i in range(n)]
        return X, y, groups, names

    def test_gbdt_learns_planted_signal(self, rng):
        X, y, groups, names = self._planted(rng)
        space = S.HyperparameterSpace(n_trials=0, n_estimators=(50, 60))
        model = S.fit_meta_model(
            "sound_pattern", ("a", "b", "c"), X, y, groups, names,
            space=space, seed=0,
        )
        probs = model.predict_proba(X)
        assert probs.shape == (len(y), 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert (probs.argmax(axis=1) == y).mean() > 0.9

    def test_feature_importance_finds_planted_columns(self, rng):
        X, y, groups, names = self._planted(rng)
        space = S.HyperparameterSpace(n_trials=0, n_estimators=(50, 60))
        model = S.fit_meta_model(
            "sound_pattern", ("a", "b", "c"), X, y, groups, names,
            space=space, seed=0,
        )
        ranked = model.feature_importance()
        assert sum(v for _, v in ranked) == pytest.approx(1.0, abs=1e-9)
        assert [v for _, v in ranked] == sorted((v for _, v in ranked), reverse=True)
        top3 = {name for name, _ in ranked[:3]}
        assert top3 <= {"sp_normal", "sp_crackles", "sp_rhonchi"}

    def test_logistic_learner_path(self, rng):
        X, y, groups, names = self._planted(rng, n=120)
        model = S.fit_meta_model(
            "sound_pattern", ("a", "b", "c"), X, y, groups, names,
            learner="logistic", seed=0,
        )
        probs = model.predict_proba(X)
        assert (probs.argmax(axis=1) == y).mean() > 0.9

    def test_predict_rejects_wrong_width(self, rng):
        X, y, groups, names = self._planted(rng, n=120)
        model = S.fit_meta_model(
            "sound_pattern", ("a", "b", "c"), X, y, groups, names,
            learner="logistic", seed=0,
        )
        with pytest.raises(ContractError):
            model.predict_proba(X[:, :7])

    def test_model_roundtrip(self, tmp_path, rng):
        X, y, groups, names = self._planted(rng, n=120)
        model = S.fit_meta_model(
            "sound_pattern", ("a", "b", "c"), X, y, groups, names,
            learner="logistic", seed=0,
        )
        path = tmp_path / "meta.pkl"
        model.save(path)
        loaded = S.MetaModel.load(path)
        np.testing.assert_allclose(loaded.predict_proba(X), model.predict_proba(X))
        assert loaded.feature_names == model.feature_names

    def test_tuning_ledger_recorded(self, rng):
        X, y, groups, names = self._planted(rng, n=160)
        space = S.HyperparameterSpace(
            n_trials=3, n_estimators=(20, 40), max_depth=(2, 4),
        )
        params, ledger = S.tune_meta_learner(X, y, groups, space, n_classes=3, seed=0)
        assert len(ledger) == 3
        for entry in ledger:
            assert "params" in entry and "score" in entry
        for spec in space.param_specs():
            assert spec.low <= params[spec.name] <= spec.high

    def test_zero_trials_returns_defaults(self, rng):
        X, y, groups, names = self._planted(rng, n=80)
        space = S.HyperparameterSpace(n_trials=0)
        params, ledger = S.tune_meta_learner(X, y, groups, space, n_classes=3, seed=0)
        assert ledger == []
        assert params == space.defaults()
