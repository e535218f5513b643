#include <catch2/catch_amalgamated.hpp>

#include "samcl/config.hpp"
#include "samcl/harness.hpp"
#include "samcl/model.hpp"
#include "samcl/runio.hpp"

TEST_CASE("headers compile and basics work", "[smoke]") {
    samcl::Tensor a = samcl::Tensor::from_data({2, 2}, {1, 2, 3, 4});
    samcl::Tensor b = samcl::Tensor::identity(2);
    samcl::Tensor c = samcl::matmul(b, a);
    CHECK(c.values() == a.values());

    samcl::ModelConfig mc;
    mc.image_size = 32;
    mc.patch_size = 8;
    mc.embed_dim = 32;
    mc.num_blocks = 2;
    mc.num_heads = 2;
    samcl::SegModel model(mc, 7);
    samcl::DomainSpec spec = samcl::DomainSpec::preset(samcl::DomainKind::base_blob, 1);
    auto samples = samcl::generate_domain(spec, 1, 3, 0, 32, 3);
    auto out = samcl::segment_sample(model, nullptr, samples[0]);
    CHECK(out.mask_logits.shape() == samcl::Shape{32, 32});
}
