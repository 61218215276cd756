"""Test-time localization: candidate ordering, greedy episodes and evaluation over a split."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from omnidrl.configurator.settings.config import RunConfig
from omnidrl.domain.boxes import Action
from omnidrl.domain.exceptions import ContractViolationError, DatasetError
from omnidrl.domain.models import EvalRecord, MetricsSummary
from omnidrl.service.agent import classify, select_action_greedy
from omnidrl.service.dataset import SceneCache, SceneSample
from omnidrl.service.environment import BoxState, LocalizationEnvironment
from omnidrl.service.metrics import rmse_metrics
from omnidrl.service.network import QNetwork
from omnidrl.utils.common import make_rng

logger = logging.getLogger(__name__)

PEDESTRIAN_CLASS = 1


class QAgent:
    """Greedy policy of a trained network; the class head orders the candidates in multi-task mode"""

    def __init__(self, net: QNetwork, use_classifier: Optional[bool] = None):
        self.net = net
        self.use_classifier = net.cls_branch is not None if use_classifier is None else use_classifier
        if self.use_classifier and net.cls_branch is None:
            raise ContractViolationError("Candidate ordering needs a classification branch")

    def pedestrian_probabilities(self, states: List[BoxState]) -> np.ndarray:
        crops = np.stack([s.crop for s in states])
        return self.net.class_probabilities(crops)[:, PEDESTRIAN_CLASS]

    def order(self, states: List[BoxState]) -> List[BoxState]:
        if not self.use_classifier:
            return list(states)
        probabilities = self.pedestrian_probabilities(states)
        return [states[i] for i in np.argsort(-probabilities, kind="stable")]

    def choose(self, env: LocalizationEnvironment) -> int:
        return select_action_greedy(self.net.q_values(env.state.crop[None])[0])


class OracleAgent:
    """Moves straight onto the ground-truth box and triggers"""

    use_classifier = False

    def order(self, states: List[BoxState]) -> List[BoxState]:
        return list(states)

    def choose(self, env: LocalizationEnvironment) -> int:
        gt = env.sample.record.gt if env.sample is not None else None
        if gt is None:
            raise DatasetError("The oracle needs a ground-truth box")
        env.teleport(gt)
        return int(Action.TRIGGER)


@dataclass(frozen=True)
class SceneResult:
    record: Optional[EvalRecord]
    crops_correct: int = 0
    crops_total: int = 0


def infer_episode(agent, env: LocalizationEnvironment, sample: SceneSample, config: RunConfig, rng: np.random.Generator) -> EvalRecord:
    """Try candidates in the agent's order until one run triggers.

    Steps add up over every run tried; IoU and position errors are those of the last run.
    """
    if sample.record.gt is None:
        raise DatasetError(f"Scene {sample.record.id} has no pedestrian to localize")
    env.load(sample)
    candidates = agent.order(env.candidates(rng))
    predicted_label = classify(agent.net, candidates[0].crop) if agent.use_classifier else None

    steps, triggered = 0, False
    for index, candidate in enumerate(candidates):
        run_steps, triggered = _run_candidate(agent, env, candidate)
        steps += run_steps
        if triggered:
            logger.debug(f"Scene {sample.record.id}: candidate {index} triggered after {run_steps} steps ({steps} in total) with IoU {env.iou:.3f}")
            break

    rho_error, beta_error = env.position_errors()
    return EvalRecord(
        steps=steps,
        final_iou=env.iou,
        triggered_correct=triggered and env.iou >= config.eval_tau,
        rho_error=rho_error,
        beta_error=beta_error,
        predicted_label=predicted_label,
    )


def _run_candidate(agent, env: LocalizationEnvironment, candidate: BoxState) -> Tuple[int, bool]:
    env.start(candidate)
    while True:
        transition = env.act(agent.choose(env))
        if transition.terminal:
            return env.state.step_index, bool(transition.info.get("triggered", False))


def candidate_classification(net: QNetwork, env: LocalizationEnvironment, states: List[BoxState]) -> Tuple[int, int]:
    """(correct, total) class-head predictions against the coverage labels of the given crops"""
    if not states:
        return 0, 0
    predictions = np.argmax(net.class_probabilities(np.stack([s.crop for s in states])), axis=1)
    labels = np.array([env.crop_label(s) for s in states])
    return int(np.sum(predictions == labels)), len(states)


def evaluate_scene(agent, env: LocalizationEnvironment, sample: SceneSample, config: RunConfig, seed: int) -> SceneResult:
    """Localization record for a positive scene (None for a negative one) plus crop classification counts"""
    correct = total = 0
    net = getattr(agent, "net", None)
    if net is not None and net.cls_branch is not None:
        env.load(sample)
        correct, total = candidate_classification(net, env, env.candidates(make_rng([seed, sample.record.id, 1])))

    if sample.record.gt is None:
        return SceneResult(record=None, crops_correct=correct, crops_total=total)
    record = infer_episode(agent, env, sample, config, make_rng([seed, sample.record.id]))
    return SceneResult(record=record, crops_correct=correct, crops_total=total)


def evaluate(agent, env: LocalizationEnvironment, cache: SceneCache, config: RunConfig, seed: int) -> Tuple[List[EvalRecord], MetricsSummary]:
    records: List[EvalRecord] = []
    crops_correct = crops_total = negatives = 0
    for position in range(len(cache)):
        sample = cache.get(position)
        if sample is None:
            continue
        result = evaluate_scene(agent, env, sample, config, seed)
        crops_correct += result.crops_correct
        crops_total += result.crops_total
        if result.record is None:
            negatives += 1
            continue
        records.append(result.record)

    if negatives:
        logger.warning(f"Skipped {negatives} negative scenes for localization metrics")
    if not records:
        raise DatasetError("No positive test scene could be evaluated")

    cls_accuracy = crops_correct / crops_total if crops_total else None
    summary = rmse_metrics(records, cls_accuracy=cls_accuracy)
    logger.info(
        f"Evaluated {summary.episodes} episodes: avg steps {summary.avg_steps:.2f}, avg IoU {summary.avg_iou:.3f}, "
        f"correct {summary.correct_pct:.1f}%, RMSE rho {summary.rmse_rho:.4f} m, RMSE beta {summary.rmse_beta:.4f} rad"
        + (f", crop accuracy {cls_accuracy:.3f}" if cls_accuracy is not None else "")
    )
    return records, summary
