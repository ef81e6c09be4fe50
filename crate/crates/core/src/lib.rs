pub mod numcore;
pub mod stylestats;
pub mod network;
pub mod synthdata;
pub mod training;
pub mod evaluation;
pub mod experiments;
