from kdlab import verify
from kdlab.autodiff import scale
from kdlab.cli import main
from kdlab.losses import kd_loss


def wrong_scale(student_logits, teacher_logits, temperature):
    # drops the tau^2 factor
    return scale(kd_loss(student_logits, teacher_logits, temperature), 1.0 / temperature**2)


def test_all_checks_pass():
    results = verify.run_checks(grad_seeds=3)
    failed = [r.line() for r in results if not r.passed]
    assert not failed


def test_wrong_kd_scaling_is_caught():
    r = verify.kd_self_identity(wrong_scale)
    assert not r.passed and r.measured > r.tolerance


def test_report_lines():
    results = verify.run_checks(grad_seeds=1)
    text = verify.report(results, 1.0)
    assert text.count("\n") >= len(results)
    assert all(r.line().split()[0] in ("PASS", "FAIL") for r in results)


def test_cli_verify_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(verify, "main_verify", lambda: (False, "FAIL x\n"))
    assert main(["verify"]) == 4
    monkeypatch.setattr(verify, "main_verify", lambda: (True, "PASS x\n"))
    assert main(["verify"]) == 0
    assert "PASS x" in capsys.readouterr().out
