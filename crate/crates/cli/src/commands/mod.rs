pub mod generate;
pub mod plot;
pub mod profile;
pub mod train;
pub mod verify;
