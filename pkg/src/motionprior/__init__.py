"""Instructable motion prior for a planar legged robot."""

from .robot import RobotGeometry, foot_fk, load_robot, save_robot
from .clips import (MotionClip, MotionSegment, RefPose, extract_segment,
                    load_clip, resample_clip, save_clip, wrap_angle)
from .generators import default_dataset, generate_synthetic_clip
from .sim import (RobotState, SimConfig, check_termination, pd_torque,
                  reset_from_reference, step)
from .rewards import (AdvRewardEma, RewardBreakdown, RewardWeights,
                      adversarial_style_reward, functionality_reward,
                      joint_style_reward, schedule_style_reward, total_reward)
from .prior import (LatentCommand, PriorConfig, PriorNetworks, ar_kl_loss,
                    next_latent)
from .discriminator import DiscConfig, DiscriminatorBank, disc_loss, make_feature

__all__ = [
    "RobotGeometry", "foot_fk", "load_robot", "save_robot",
    "MotionClip", "MotionSegment", "RefPose", "extract_segment", "load_clip",
    "resample_clip", "save_clip", "wrap_angle",
    "default_dataset", "generate_synthetic_clip",
    "RobotState", "SimConfig", "check_termination", "pd_torque",
    "reset_from_reference", "step",
    "AdvRewardEma", "RewardBreakdown", "RewardWeights",
    "adversarial_style_reward", "functionality_reward", "joint_style_reward",
    "schedule_style_reward", "total_reward",
    "LatentCommand", "PriorConfig", "PriorNetworks", "ar_kl_loss", "next_latent",
    "DiscConfig", "DiscriminatorBank", "disc_loss", "make_feature",
]
