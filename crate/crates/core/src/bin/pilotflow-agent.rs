use clap::Parser;
use pilotflow_core::agent::{self, AgentCli};

fn main() {
    agent::init_tracing();
    std::process::exit(agent::run(AgentCli::parse()));
}
