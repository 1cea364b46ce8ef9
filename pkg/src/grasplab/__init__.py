"""Contextual policy search toolkit for multi-fingered grasping.

Submodules:
  hand     -- hand kinematics and the default hand model
  world    -- quasi-static grasp simulator and object primitives
  demos    -- demonstration trajectories and grasp styles
  rewards  -- reward terms and their weighted combination
  policy   -- observation assembly and the Gaussian MLP policy
  ppo      -- rollout collection, advantage estimation, training loop
  adapt    -- CMA-ES adaptation of the keypoint context
  harness  -- evaluation protocols, scripted baseline, experiment suites
"""

__version__ = "0.1.0"
