"""SSIM and the similarity-gated epsilon controller."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attacks import AttackConfig, AttackOutcome, run_attack

SSIM_FLOOR = 0.95
STARVED_TOL = 1e-9


@dataclass(frozen=True)
class SsimParams:
    window: int = 8
    data_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def ssim(a, b, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over all ``window x window`` positions (stride 1), averaged over channels.

    Windows are uniform and use population (1/n) statistics.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    w = params.window
    if a.shape[0] < w or a.shape[1] < w:
        raise ValueError(f"{w}x{w} window does not fit a {a.shape[0]}x{a.shape[1]} image")
    wa = sliding_window_view(a, (w, w), axis=(0, 1))  # (Ho, Wo, C, w, w)
    wb = sliding_window_view(b, (w, w), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    c1, c2 = params.c1, params.c2
    num = (2 * (mu_a * mu_b) + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(axis=(0, 1))
    return float(per_channel.mean())


@dataclass(frozen=True)
class EpsController:
    factor: float = 2.0
    max_adjustments: int = 6
    floor: float = SSIM_FLOOR
    probe_iterations: int = 1

    def __post_init__(self):
        if self.factor <= 1:
            raise ValueError("factor must be > 1")
        if self.max_adjustments < 0:
            raise ValueError("max_adjustments must be >= 0")
        if self.probe_iterations < 1:
            raise ValueError("probe_iterations must be >= 1")


def attack_with_budget(model, x, config: AttackConfig, controller: EpsController = EpsController(),
                       quantizer=None, ssim_params: SsimParams = SsimParams()) -> AttackOutcome:
    """Run the attack, rescaling epsilon until the SSIM floor is respected.

    * the first ``probe_iterations`` already push SSIM below the floor: halve
      epsilon (divide by ``factor``) and rerun;
    * the finished run leaves SSIM at 1: the gradient was starved, so double
      epsilon and rerun;
    * the finished run ends below the floor: keep the last iterate that is
      still above it.

    At most ``max_adjustments`` reruns. ``quantizer(adv, orig, eps)``, when
    given, maps every candidate to what will actually be emitted (e.g. 8-bit
    pixels) before it is judged.

    ``status`` is one of ``ok``, ``fallback``, ``gradient-starved`` or
    ``failed-constraint``; the last returns the original image.
    """
    x = np.asarray(x, dtype=np.float64)
    floor = controller.floor
    scale, adjustments, runs = 1.0, 0, 0
    history = []

    while True:
        cfg = config.scaled(scale)

        def view(adv, eps=cfg.epsilon):
            return adv if quantizer is None else quantizer(adv, x, eps)

        probe = {}

        def stop(n, adv):
            if n == controller.probe_iterations:
                probe["ssim"] = ssim(x, view(adv), ssim_params)
                return probe["ssim"] < floor
            return False

        runs += 1
        out = run_attack(model, x, cfg, keep_iterates=True, stop=stop)
        if probe.get("ssim", 1.0) < floor:
            history.append({"epsilon": cfg.epsilon, "event": "probe-below-floor", "ssim": probe["ssim"]})
            if adjustments < controller.max_adjustments:
                scale /= controller.factor
                adjustments += 1
                continue
            result = AttackOutcome(x.copy(), x, 0, cfg.epsilon, out.trace, final_ssim=1.0,
                                   status="failed-constraint")
            break

        final = view(out.adversarial)
        final_ssim = ssim(x, final, ssim_params)
        if final_ssim >= 1.0 - STARVED_TOL:
            history.append({"epsilon": cfg.epsilon, "event": "ssim-unchanged", "ssim": final_ssim})
            if cfg.epsilon > 0 and adjustments < controller.max_adjustments:
                scale *= controller.factor
                adjustments += 1
                continue
            result = AttackOutcome(final, x, out.iterations_run, cfg.epsilon, out.trace,
                                   final_ssim=final_ssim, status="gradient-starved")
            break

        if final_ssim >= floor:
            result = AttackOutcome(final, x, out.iterations_run, cfg.epsilon, out.trace,
                                   final_ssim=final_ssim, status="ok")
            break

        # walk back to the last iterate still above the floor
        result = None
        for n in range(len(out.iterates) - 1, -1, -1):
            cand = view(out.iterates[n])
            s = ssim(x, cand, ssim_params)
            if s >= floor:
                result = AttackOutcome(cand, x, n + 1, cfg.epsilon, out.trace[:n + 1],
                                       final_ssim=s, status="fallback")
                break
        if result is None:  # only reachable when probe_iterations > 1 with a late dip
            result = AttackOutcome(x.copy(), x, 0, cfg.epsilon, out.trace, final_ssim=1.0,
                                   status="failed-constraint")
        break

    result.runs = runs
    result.adjustments = adjustments
    result.meta["controller"] = history
    return result


@dataclass
class SubmissionReport:
    records: list[dict] = field(default_factory=list)
    floor: float = SSIM_FLOOR

    @property
    def passed(self) -> int:
        return sum(r["passed"] for r in self.records)

    @property
    def pass_rate(self) -> float | None:
        return self.passed / len(self.records) if self.records else None

    @property
    def failures(self) -> list[int]:
        return [r["index"] for r in self.records if not r["passed"]]


def validate_submission(pairs, floor: float = SSIM_FLOOR, params: SsimParams = SsimParams()) -> SubmissionReport:
    """Per-pair SSIM against ``floor`` (inclusive). Bad pairs fail individually."""
    report = SubmissionReport(floor=floor)
    for i, (orig, adv) in enumerate(pairs):
        try:
            s = ssim(orig, adv, params)
            report.records.append({"index": i, "ssim": s, "passed": s >= floor, "error": None})
        except ValueError as exc:
            report.records.append({"index": i, "ssim": None, "passed": False, "error": str(exc)})
    return report
