//! Headless 2.5D grasping lab: randomized block scenes, a depth/RGB camera,
//! shaped rewards with a curriculum, and PPO / TRPO / DDPG over small
//! convolutional Gaussian policies.

pub mod algos;
pub mod curriculum;
pub mod env;
pub mod geom;
pub mod harness;
pub mod nn;
pub mod render;
pub mod reward;
pub mod scene;
