//! Library surface of the `fusedet` command-line tool; the binary is a
//! thin argument-parsing wrapper over [`commands`].

pub mod commands;
pub mod manifest;
pub mod svg;
