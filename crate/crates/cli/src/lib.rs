pub mod commands;
pub mod error;
pub mod server;

pub use commands::main_with_args;
pub use error::{CliError, ErrorKind};
