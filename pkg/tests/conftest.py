import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        note = getattr(item, "criterion_note", "")
        if report.failed:
            crash = getattr(report.longrepr, "reprcrash", None)
            message = crash.message.splitlines()[0] if crash is not None else "failed"
            text = f"{note}; {message}" if note else message
        else:
            text = note
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        if report.skipped:
            text = str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else "skipped"
        _CRITERIA[n] = (title, status, text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        line = f"criterion {n:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))


@pytest.fixture
def note(request):
    """Attach a one-line measurement summary to the criterion line."""

    def _note(text):
        request.node.criterion_note = text

    return _note


MICRO_YAML = """\
preset: tiny
seed: 3
canvas: {size: 32, pixel_size: 6.0}
data: {n_images: 24, n_aux_masks: 16, crop: 32, resize_to: 36}
net:
  image_size: 32
  base_channels: 4
  downsample_levels: 2
  residual_blocks: 1
  disc_channels: 4
  latent_length: 8
  vae_channels: 4
  vae_max_channels: 8
  latent_disc_hidden: 8
stage1:
  epochs_flat: 1
  epochs_decay: 1
  steps_per_epoch: 3
  vae: {epochs: 2, batch_size: 8}
stage2: {max_rounds: 2, epochs_per_round: 2, batch_size: 4}
"""


@pytest.fixture
def micro_config(tmp_path):
    """A tiny-preset config shrunk to 32 px so whole-pipeline runs take seconds."""
    path = tmp_path / "micro.yaml"
    path.write_text(MICRO_YAML)
    return path
