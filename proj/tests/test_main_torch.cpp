#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <torch/torch.h>

int main(int argc, char** argv) {
    // One intra-op thread keeps every reduction order, and so every result, reproducible.
    torch::set_num_threads(1);
    doctest::Context context(argc, argv);
    return context.run();
}
