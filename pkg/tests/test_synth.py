import numpy as np
import pytest

from latefuse.data import load_dataset
from latefuse.synth import ModalitySpec, SynthSpec, SynthError, generate, save_dataset


def _spec(seed=0, **kwargs):
    defaults = dict(
        n_samples=50,
        n_classes=3,
        modalities=(
            ModalitySpec(name="A", n_features=12, n_informative=4, separation=2.0,
                         missing_fraction=0.1),
            ModalitySpec(name="B", n_features=8, n_informative=3, separation=1.0,
                         count_valued=True, zero_fraction=0.2),
        ),
        seed=seed,
    )
    defaults.update(kwargs)
    return SynthSpec(**defaults)


class TestGenerate:
    def test_deterministic(self):
        a, ma = generate(_spec(seed=4))
        b, mb = generate(_spec(seed=4))
        assert ma == mb
        for ta, tb in zip(a.modalities, b.modalities):
            np.testing.assert_array_equal(ta.values, tb.values)

    def test_manifest_matches_planted_signal(self):
        ds, manifest = generate(_spec(seed=1))
        table = ds.modalities[0]
        info = manifest["modalities"][0]
        informative = set(info["informative_features"])
        for j, name in enumerate(table.feature_names):
            col = table.values[:, j]
            means = [np.nanmean(col[ds.labels == k]) for k in range(3)]
            spread = max(means) - min(means)
            if name in informative:
                assert spread > 1.0
            else:
                assert spread < 1.0

    def test_count_modality_is_nonnegative_integers(self):
        ds, _ = generate(_spec(seed=2))
        values = ds.modalities[1].values
        observed = values[~np.isnan(values)]
        assert (observed >= 0).all()
        np.testing.assert_array_equal(observed, np.round(observed))

    def test_missingness_fraction_close_to_requested(self):
        ds, _ = generate(_spec(seed=3, n_samples=400))
        frac = np.isnan(ds.modalities[0].values).mean()
        assert frac == pytest.approx(0.1, abs=0.03)

    def test_class_weights_respected(self):
        spec = _spec(seed=5, n_samples=100, class_weights=(0.5, 0.3, 0.2))
        ds, manifest = generate(spec)
        counts = np.bincount(ds.labels)
        np.testing.assert_array_equal(counts, [50, 30, 20])

    def test_complementary_classes_are_flat_elsewhere(self):
        spec = SynthSpec(
            n_samples=120,
            n_classes=4,
            modalities=(
                ModalitySpec(name="A", n_features=10, n_informative=5, separation=2.0,
                             informative_classes=(0, 1)),
            ),
            seed=6,
        )
        ds, manifest = generate(spec)
        table = ds.modalities[0]
        informative = set(manifest["modalities"][0]["informative_features"])
        for j, name in enumerate(table.feature_names):
            if name not in informative:
                continue
            col = table.values[:, j]
            m2 = np.nanmean(col[ds.labels == 2])
            m3 = np.nanmean(col[ds.labels == 3])
            # classes outside the informative pair share the zero-mean noise
            assert abs(m2) < 0.8 and abs(m3) < 0.8 and abs(m2 - m3) < 0.8

    def test_infeasible_spec_errors(self):
        with pytest.raises(SynthError):
            SynthSpec(
                n_samples=10, n_classes=2,
                modalities=(ModalitySpec(name="A", n_features=3, n_informative=5),),
            )

    def test_every_class_present(self):
        ds, _ = generate(_spec(seed=7, n_samples=11))
        assert set(ds.labels.tolist()) == {0, 1, 2}


class TestSaveLoad:
    def test_round_trip(self, tmp_path):
        ds, manifest = generate(_spec(seed=8))
        save_dataset(ds, manifest, tmp_path)
        loaded = load_dataset(
            [(t.modality_name, tmp_path / f"{t.modality_name}.csv") for t in ds.modalities],
            tmp_path / "labels.csv",
        )
        assert loaded.sample_ids == ds.sample_ids
        # class index order follows first appearance in the labels file, so
        # compare the per-sample class tokens rather than raw indices
        assert set(loaded.class_names) == set(ds.class_names)
        for i in range(ds.n_samples):
            assert loaded.class_names[loaded.labels[i]] == ds.class_names[ds.labels[i]]
        for a, b in zip(loaded.modalities, ds.modalities):
            np.testing.assert_allclose(a.values, b.values, equal_nan=True)

    def test_rerun_writes_identical_bytes(self, tmp_path):
        ds, manifest = generate(_spec(seed=9))
        save_dataset(ds, manifest, tmp_path / "one")
        save_dataset(ds, manifest, tmp_path / "two")
        for name in ("A.csv", "B.csv", "labels.csv", "manifest.json"):
            assert (tmp_path / "one" / name).read_bytes() == (
                tmp_path / "two" / name
            ).read_bytes()
