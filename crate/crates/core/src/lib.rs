//! Multi-agent economy simulator for an extraction-shooter MMO.

pub mod analytics;
pub mod api;
pub mod battle;
pub mod datagen;
pub mod domain;
pub mod economy;
pub mod engine;
pub mod intervention;
pub mod messaging;
pub mod persistence;
pub mod policy;
pub mod rng;
