fn main() -> std::process::ExitCode {
    fairloop_service::cli::main()
}
