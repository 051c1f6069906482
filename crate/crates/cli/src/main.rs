fn main() {
    eprintln!("error category=config pipeline commands are not wired up yet");
    std::process::exit(1);
}
