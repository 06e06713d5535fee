fn main() {
    // Rust ignores SIGPIPE by default, which turns `netcate ... | head` into
    // a panic on the first print after the pipe closes. Restore the default
    // disposition so the process terminates quietly like other CLI tools.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(netcate::cli::run());
}
