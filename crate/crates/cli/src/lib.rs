pub mod bench;
pub mod commands;
pub mod config;
pub mod record;
