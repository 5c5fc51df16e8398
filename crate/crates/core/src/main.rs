fn main() -> std::process::ExitCode {
    dmlite::cli::main()
}
