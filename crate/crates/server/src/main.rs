fn main() -> std::process::ExitCode {
    gate_server::cli::main()
}
