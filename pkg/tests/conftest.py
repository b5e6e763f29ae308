import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def boxes_small():
    from panfield.synth_oracle import NoiseSpec, make_dataset, three_boxes

    return make_dataset(three_boxes(), 3, (16, 16), NoiseSpec(permute_instances=True, seed=4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = dict(
    geo_resolutions="4,8",
    sem_resolution=4,
    geo_freqs=1,
    sem_freqs=1,
    sh_degree=1,
    geo_width=8,
    geo_feature_dim=3,
    app_width=8,
    sem_width=8,
    coarse_levels=1,
    patch_size=8,
    patches_per_step=1,
    n_samples=8,
    assign_every=5,
    assign_warmup="",
    assign_pixels=32,
    extractor_channels="3,3",
    extractor_kernel=2,
    extractor_stride=2,
    extractor_min=8,
    holdout_every=0,
    log_every=0,
)


@pytest.fixture
def tiny_config():
    from panfield.config import TrainConfig

    def make(**changes):
        return TrainConfig(**{**TINY, **changes})

    return make


# ------------------------------------------------------------ acceptance report

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    details = [v for k, v in item.user_properties if k == "detail"]
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] = details or entry["details"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        line = f"criterion {number} {status}: {e['title']}"
        if e["details"]:
            line += " | " + "; ".join(e["details"])
        terminalreporter.write_line(line)
