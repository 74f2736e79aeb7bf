//! Offline training environment for visual-creation agents: a trajectory
//! grammar, a simulated tool sandbox, a multi-component reward, an episodic
//! environment, group rollouts, and sim-to-real bound evaluators.

pub mod env;
pub mod reward;
pub mod rollout;
pub mod theory;
pub mod toolsim;
pub mod trajectory;
