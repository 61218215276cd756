import logging
import math
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from omnidrl.configurator.settings.config import TrainConfig
from omnidrl.domain.exceptions import CheckpointMismatchError, TrainingDivergedError
from omnidrl.service.agent import SGD, ReplayMemory, TargetNetwork, cls_loss, drl_loss, select_action_boltzmann, temperature_at
from omnidrl.service.environment import Transition
from omnidrl.service.network import QNetwork

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "episode", "reward", "drl_loss", "cls_loss", "avg_iou"]


class Environment(Protocol):
    def reset(self, rng: np.random.Generator) -> NDArray: ...

    def act(self, action: int) -> Transition: ...

    def classification_samples(self) -> List[Tuple[NDArray, int]]: ...


class DQNTrainer:
    """Double-DQN training loop with a multi-task classification branch.

    Every step takes one Boltzmann action, stores the experience, then runs
    drl_updates Q-branch updates and cls_updates classification updates.
    Checkpoints are offered at the first episode boundary at or after each
    multiple of checkpoint_every and once more at the end.
    """

    def __init__(
        self,
        net: QNetwork,
        env: Environment,
        config: TrainConfig,
        rng: np.random.Generator,
        quantize_replay: bool = True,
        checkpoint_hook: Optional[Callable[["DQNTrainer", bool], None]] = None,
    ):
        self.net = net
        self.env = env
        self.config = config
        self.rng = rng
        self.checkpoint_hook = checkpoint_hook
        self.target = TargetNetwork(net, config.target_sync)
        self.optimizer = SGD(net.params, config.learning_rate, config.momentum)
        self.memory = ReplayMemory(config.replay_capacity, net.input_shape, quantize=quantize_replay)
        self.step = 0
        self.episode = 0
        self.next_checkpoint = config.checkpoint_every
        self.log_rows: List[Dict[str, float]] = []
        self.episode_history: List[Dict[str, Any]] = []
        self._observation: Optional[NDArray] = None
        self._episode_reward = 0.0
        self._episode_iou_sum = 0.0
        self._episode_steps = 0

    def train(self, max_steps: Optional[int] = None) -> QNetwork:
        """Run until max_steps total steps (defaults to the config's)"""
        max_steps = self.config.max_steps if max_steps is None else max_steps
        logger.info(f"Training from step {self.step} to {max_steps} ({self.net.n_params} parameters, multi_task={self.multi_task})")
        while self.step < max_steps:
            if self._observation is None:
                self._begin_episode()
            self._train_step()
        self._offer_checkpoint(final=True)
        logger.info(f"Training finished at step {self.step} after {self.episode} episodes")
        return self.net

    @property
    def multi_task(self) -> bool:
        return self.net.cls_branch is not None

    def _begin_episode(self) -> None:
        """Reset the environment and store the episode's labelled crops"""
        self._observation = self.env.reset(self.rng)
        for crop, label in self.env.classification_samples():
            self.memory.push_labelled(crop, label)
        self._episode_reward = 0.0
        self._episode_iou_sum = 0.0
        self._episode_steps = 0

    def _train_step(self) -> None:
        state = self._observation
        q = self.net.q_values(state[None])[0]
        action = select_action_boltzmann(q, temperature_at(self.step, self.config), self.rng)
        outcome = self.env.act(action)
        self.memory.push(state, action, outcome.reward, outcome.observation, outcome.terminal)
        self.step += 1

        drl = self._run_drl_updates()
        cls = self._run_cls_updates()
        self.target.maybe_sync(self.net, self.step)
        self._record_step(outcome, drl, cls)

        if outcome.terminal:
            self._end_episode(outcome)
        else:
            self._observation = outcome.observation

    def _run_drl_updates(self) -> float:
        """Mean Q-branch loss of this step's updates, NaN while the memory holds less than one batch"""
        if len(self.memory) < self.config.batch_size or self.config.drl_updates == 0:
            return math.nan
        losses = []
        for _ in range(self.config.drl_updates):
            batch = self.memory.sample(self.config.batch_size, self.rng)
            loss, _ = drl_loss(batch, self.net, self.target, self.config.gamma)
            self._guard(loss, "drl_loss")
            self.optimizer.step(self.net.grads)
            losses.append(loss)
        return float(np.mean(losses))

    def _run_cls_updates(self) -> float:
        if not self.multi_task or self.memory.labelled_size == 0 or self.config.cls_updates == 0:
            return math.nan
        losses = []
        for _ in range(self.config.cls_updates):
            crops, labels = self.memory.sample_labelled(self.config.batch_size, self.rng)
            loss, _ = cls_loss(crops, labels, self.net)
            self._guard(loss, "cls_loss")
            self.optimizer.step(self.net.grads)
            losses.append(loss)
        return float(np.mean(losses))

    def _guard(self, loss: float, name: str) -> None:
        if not math.isfinite(loss):
            logger.error(f"{name} became {loss} at step {self.step} (episode {self.episode})")
            raise TrainingDivergedError(f"{name} is not finite at step {self.step}")

    def _record_step(self, outcome: Transition, drl: float, cls: float) -> None:
        iou = float(outcome.info.get("iou", math.nan))
        self._episode_reward += outcome.reward
        self._episode_steps += 1
        self._episode_iou_sum += iou
        self.log_rows.append(
            {
                "step": self.step,
                "episode": self.episode,
                "reward": outcome.reward,
                "drl_loss": drl,
                "cls_loss": cls,
                "avg_iou": self._episode_iou_sum / self._episode_steps,
            }
        )
        logger.debug(f"step={self.step} reward={outcome.reward:+.0f} iou={iou:.3f} drl_loss={drl:.4f} cls_loss={cls:.4f}")

    def _end_episode(self, outcome: Transition) -> None:
        summary = {
            "episode": self.episode,
            "steps": self._episode_steps,
            "reward": self._episode_reward,
            "final_iou": float(outcome.info.get("iou", math.nan)),
            "triggered": bool(outcome.info.get("triggered", False)),
        }
        self._update_episode_history(summary)
        logger.info(
            f"Episode {self.episode} ended at step {self.step}: {summary['steps']} steps, "
            f"reward {summary['reward']:+.0f}, final IoU {summary['final_iou']:.3f}, triggered={summary['triggered']}"
        )
        self.episode += 1
        self._observation = None
        if self.step >= self.next_checkpoint:
            while self.next_checkpoint <= self.step:
                self.next_checkpoint += self.config.checkpoint_every
            self._offer_checkpoint(final=False)

    def _update_episode_history(self, summary: Dict[str, Any]) -> None:
        """Keep only the latest episode summaries"""
        self.episode_history.append(summary)
        if len(self.episode_history) > 10:
            self.episode_history.pop(0)

    def _offer_checkpoint(self, final: bool) -> None:
        if self.checkpoint_hook is not None:
            self.checkpoint_hook(self, final)

    @property
    def at_episode_boundary(self) -> bool:
        return self._observation is None

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log_rows, columns=LOG_COLUMNS)

    def write_log(self, path: str) -> None:
        self.log_frame().to_csv(path, index=False)
        logger.info(f"Wrote {len(self.log_rows)} training log rows to {path}")

    def get_status(self) -> dict:
        return {
            "step": self.step,
            "episode": self.episode,
            "replay_size": len(self.memory),
            "labelled_size": self.memory.labelled_size,
            "target_syncs": list(self.target.sync_steps),
            "temperature": temperature_at(self.step, self.config),
            "episode_history": self.episode_history,
        }

    def state_dict(self) -> Tuple[Dict[str, NDArray], Dict[str, Any]]:
        """Arrays and JSON-able counters that let a run continue bit-identically from an episode boundary"""
        if not self.at_episode_boundary:
            raise CheckpointMismatchError("Training state can only be captured between episodes")
        arrays = {f"replay_{name}": value for name, value in self.memory.state_dict().items()}
        arrays["params"] = self.net.get_flat()
        arrays["target_params"] = self.target.net.get_flat()
        arrays["velocity"] = self.optimizer.flat_velocity()
        extra = {
            "step": self.step,
            "episode": self.episode,
            "next_checkpoint": self.next_checkpoint,
            "rng_state": self.rng.bit_generator.state,
            "target_syncs": self.target.sync_steps,
            "log_rows": self.log_rows,
            "episode_history": self.episode_history,
        }
        return arrays, extra

    def load_state_dict(self, arrays: Dict[str, NDArray], extra: Dict[str, Any]) -> None:
        if arrays["params"].size != self.net.n_params:
            raise CheckpointMismatchError(f"Training state has {arrays['params'].size} parameters, network has {self.net.n_params}")
        self.net.set_flat(arrays["params"])
        self.target.net.set_flat(arrays["target_params"])
        self.optimizer.set_flat_velocity(arrays["velocity"])
        self.memory.load_state_dict({name[len("replay_") :]: value for name, value in arrays.items() if name.startswith("replay_")})
        self.step = int(extra["step"])
        self.episode = int(extra["episode"])
        self.next_checkpoint = int(extra["next_checkpoint"])
        self.rng.bit_generator.state = extra["rng_state"]
        self.target.sync_steps = [int(s) for s in extra["target_syncs"]]
        self.log_rows = [dict(row) for row in extra["log_rows"]]
        self.episode_history = list(extra["episode_history"])
        self._observation = None
        logger.info(f"Resumed training state at step {self.step} (episode {self.episode})")
