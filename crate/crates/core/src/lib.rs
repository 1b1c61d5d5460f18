//! Wrench-level multirotor control: airframe geometry, slack-QP allocation and its
//! neural imitation, a batched rigid-body simulator, PPO training, and policy
//! transfer between airframes through a persistent library.

pub mod airframe;
pub mod alloc;
pub mod neural;
pub mod sim;
pub mod rl;
pub mod transfer;
