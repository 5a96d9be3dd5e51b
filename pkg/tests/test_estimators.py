import numpy as np
import pytest
from sklearn.base import clone
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline

from phasecollapse import LearnedScatteringClassifier, ScatteringTransform
from phasecollapse.cli import synthetic_dataset
from phasecollapse.estimators import check_images
from phasecollapse.exceptions import ParameterError


@pytest.fixture(scope="module")
def gratings():
    return synthetic_dataset(256, 16, 1, seed=0), synthetic_dataset(128, 16, 1, seed=1)


class TestCheckImages:
    def test_layouts(self):
        x = np.zeros((2, 3, 4, 4))
        assert check_images(x).shape == (2, 3, 4, 4)
        assert check_images(np.zeros((2, 4, 4))).shape == (2, 1, 4, 4)
        assert check_images(x.reshape(2, -1), 3, 4).shape == (2, 3, 4, 4)

    @pytest.mark.parametrize("bad,kw", [
        (np.zeros((2, 48)), {}),
        (np.zeros((2, 47)), {"in_channels": 3, "image_size": 4}),
        (np.zeros((2, 1, 4, 5)), {}),
        (np.zeros((0, 1, 4, 4)), {}),
        (np.zeros(5), {}),
        (np.zeros((1, 1, 4, 4)) + 1j, {}),
        (np.full((1, 1, 4, 4), np.nan), {}),
        (np.zeros((1, 2, 4, 4)), {"in_channels": 1}),
        (np.zeros((1, 1, 4, 4)), {"image_size": 8}),
    ])
    def test_errors(self, bad, kw):
        with pytest.raises(ParameterError):
            check_images(bad, **kw)


class TestScatteringTransform:
    def test_params_and_clone(self):
        st = ScatteringTransform(J=2, grid=7)
        assert st.get_params()["J"] == 2
        assert clone(st).get_params() == st.get_params()

    def test_shapes(self, gratings):
        train, _ = gratings
        st = ScatteringTransform(J=2, L=4, grid=7, batch_size=100).fit(train.images)
        F = st.transform(train.images)
        C, H, W = st.output_shape_
        assert F.shape == (256, C * H * W) and np.isrealobj(F)
        maps = st.set_params(flatten=False).transform(train.images[:3])
        assert maps.shape == (3, C, H, W)
        np.testing.assert_allclose(maps.reshape(3, -1), F[:3])

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            ScatteringTransform().transform(np.zeros((1, 1, 8, 8)))

    def test_wrong_size(self, gratings):
        st = ScatteringTransform(J=1, grid=7).fit(gratings[0].images)
        with pytest.raises(ParameterError):
            st.transform(np.zeros((1, 1, 8, 8)))

    def test_pipeline(self, gratings):
        train, test = gratings
        pipe = make_pipeline(ScatteringTransform(J=2, L=4, grid=7), LogisticRegression(max_iter=2000))
        assert pipe.fit(train.images, train.labels).score(test.images, test.labels) > 0.7


class TestClassifier:
    def kw(self, **extra):
        return {"depth": 2, "widths": (8, 16), "L": 4, "grid": 7, "epochs": 8, "batch_size": 32,
                "lr": 0.05, "lr_period": None, **extra}

    def test_clone(self):
        clf = LearnedScatteringClassifier(**self.kw())
        assert clone(clf).get_params() == clf.get_params()

    @pytest.mark.parametrize("learned", [True, False])
    def test_fits_gratings(self, gratings, learned):
        train, test = gratings
        clf = LearnedScatteringClassifier(**self.kw(learned=learned)).fit(train.images, train.labels)
        assert clf.score(test.images, test.labels) > 0.9

    def test_label_encoding(self, gratings):
        train, _ = gratings
        names = np.array(["n", "ne", "e", "se"])[train.labels]
        clf = LearnedScatteringClassifier(**self.kw(epochs=2)).fit(train.images, names)
        assert list(clf.classes_) == ["e", "n", "ne", "se"]
        pred = clf.predict(train.images[:5])
        assert set(pred) <= set(clf.classes_)
        proba = clf.predict_proba(train.images[:5])
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        assert np.array_equal(clf.classes_[proba.argmax(axis=1)], pred)

    def test_validation_curve(self, gratings):
        train, test = gratings
        clf = LearnedScatteringClassifier(**self.kw(epochs=2))
        clf.fit(train.images, train.labels, test.images, test.labels)
        assert len(clf.report_.test_err) == 2 and np.all(np.isfinite(clf.report_.test_err))

    def test_seeded(self, gratings):
        train, _ = gratings
        a = LearnedScatteringClassifier(**self.kw(epochs=1)).fit(train.images[:64], train.labels[:64])
        b = LearnedScatteringClassifier(**self.kw(epochs=1)).fit(train.images[:64], train.labels[:64])
        np.testing.assert_array_equal(a.decision_function(train.images[:8]), b.decision_function(train.images[:8]))

    def test_length_mismatch(self, gratings):
        with pytest.raises(ParameterError):
            LearnedScatteringClassifier(**self.kw()).fit(gratings[0].images, gratings[0].labels[:-1])

    def test_default_widths(self):
        clf = LearnedScatteringClassifier(depth=7)
        config = clf._network_config(np.zeros((1, 3, 32, 32)))
        assert config.widths == (32, 64, 128, 256, 256, 256, 256)
