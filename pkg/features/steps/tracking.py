import tempfile
from pathlib import Path

from behave import given, then, when

from src.app.main import CHECKPOINT_FILE, METRICS_FILE, main

TINY_CONFIG = """\
pillars.pillar_size = 0.2,0.2,4
decoder.k = 16
training.max_steps = 3
training.batch_size = 2
data.train_sequences = 2
data.eval_sequences = 1
scenario.n_frames = 3
scenario.points_on_target = 64
"""


def _workdir(context) -> Path:
    if not hasattr(context, "workdir"):
        context.workdir = Path(tempfile.mkdtemp(prefix="tracker-"))
    return context.workdir


@given("a tiny desk configuration")
def tiny_config(context):
    context.config_path = _workdir(context) / "tiny.cfg"
    context.config_path.write_text(TINY_CONFIG, encoding="utf-8")


@given('the configuration also sets "{line}"')
def extra_config_line(context, line):
    with open(context.config_path, "a", encoding="utf-8") as f:
        f.write(line + "\n")


def _run(context, argv):
    context.exit_code = main(argv)


@when('I run "{command}" with seed {seed:d}')
def run_command(context, command, seed):
    context.out = _workdir(context) / "run"
    _run(context, [command, "--config", str(context.config_path), "--seed", str(seed), "--out", str(context.out)])


@when('I run "{command}" with seed {seed:d} into a second directory')
def run_command_again(context, command, seed):
    context.second_out = _workdir(context) / "run2"
    _run(context, [command, "--config", str(context.config_path), "--seed", str(seed),
                   "--out", str(context.second_out)])


@when('I evaluate the checkpoint with strategy "{strategy}"')
def run_eval(context, strategy):
    checkpoint = context.out / CHECKPOINT_FILE
    context.out = _workdir(context) / "eval"
    _run(context, ["eval", "--config", str(context.config_path), "--checkpoint", str(checkpoint),
                   "--strategy", strategy, "--seed", "1", "--out", str(context.out)])


@when("I run the ablation with an empty matrix")
def run_empty_ablation(context):
    matrix = _workdir(context) / "matrix.txt"
    matrix.write_text("# nothing here\n", encoding="utf-8")
    context.out = _workdir(context) / "ablate"
    _run(context, ["ablate", str(matrix), "--config", str(context.config_path), "--out", str(context.out)])


@then("the command exits with code {code:d}")
def check_exit_code(context, code):
    assert context.exit_code == code, f"exit code {context.exit_code}"


@then('the output contains "{name}"')
def check_output_file(context, name):
    assert (context.out / name).exists(), f"{name} missing in {context.out}"


@then("the metrics file has {count:d} records")
def check_metrics(context, count):
    lines = (context.out / METRICS_FILE).read_text(encoding="utf-8").splitlines()
    assert len(lines) == count


@then("both metrics files are identical")
def check_identical(context):
    first = (context.out / METRICS_FILE).read_text(encoding="utf-8")
    second = (context.second_out / METRICS_FILE).read_text(encoding="utf-8")
    assert first == second
