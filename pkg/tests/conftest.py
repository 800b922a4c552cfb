import pytest

from ulklab.benchmark import BundleCache


@pytest.fixture(scope="session")
def bundle_cache():
    """Process-wide store of trained benchmark bundles."""
    return BundleCache()


@pytest.fixture(scope="session")
def bundles(bundle_cache):
    """Shared lazily trained benchmark bundles: bundles(seed[, forget])."""
    return bundle_cache.get
