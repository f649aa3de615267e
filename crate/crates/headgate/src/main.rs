fn main() {
    // CLI wiring lands with the commands module.
}
